// Binary checkpoint format, versioned and self-describing:
//
//   magic "HQLT" | version u32 | config_len u32 | config TOML bytes
//   | n_entries u32 | per entry: name_len u32, name, ndim u32, dims (u64s),
//     scalar_width u32 | raw little-endian f64 arrays in entry order
//
// Loading validates magic, version, and the full name/shape table against
// the caller's config, so a checkpoint never silently loads into a
// mismatched model.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use hqlt_core::model::{param_specs, ModelConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MAGIC: &[u8; 4] = b"HQLT";
pub const VERSION: u32 = 1;
const SCALAR_WIDTH: u32 = 8;

fn io_err(e: std::io::Error) -> CliError {
    CliError::config(format!("checkpoint io error: {e}"))
}

/// Write parameters with the resolved experiment config embedded.
pub fn save(
    path: &Path,
    exp: &ExperimentConfig,
    model_cfg: &ModelConfig,
    flat: &[f64],
) -> Result<(), CliError> {
    let specs = param_specs(model_cfg);
    let total: usize = specs.iter().map(|s| s.len()).sum();
    if total != flat.len() {
        return Err(CliError::config(format!(
            "checkpoint save: {} parameters but layout expects {total}",
            flat.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let cfg_bytes = exp.to_toml().into_bytes();
    w.write_all(&(cfg_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&cfg_bytes).map_err(io_err)?;
    w.write_all(&(specs.len() as u32).to_le_bytes()).map_err(io_err)?;
    for spec in &specs {
        let name = spec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        w.write_all(&(spec.shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for &d in &spec.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&SCALAR_WIDTH.to_le_bytes()).map_err(io_err)?;
    }
    for v in flat {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CliError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CliError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(u64::from_le_bytes(buf))
}

/// Load a checkpoint, returning the embedded config and the parameters.
/// When `expect` is given, the stored name/shape table must match its
/// parameter layout exactly.
pub fn load(
    path: &Path,
    expect: Option<&ModelConfig>,
) -> Result<(ExperimentConfig, Vec<f64>), CliError> {
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(CliError::config("checkpoint load: bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CliError::config(format!(
            "checkpoint load: unsupported version {version}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(io_err)?;
    let cfg_text = String::from_utf8(cfg_bytes)
        .map_err(|_| CliError::config("checkpoint load: config snapshot is not UTF-8".into()))?;
    let exp = ExperimentConfig::from_toml(&cfg_text)?;

    let n_entries = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    let mut total = 0usize;
    for _ in 0..n_entries {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| CliError::config("checkpoint load: bad entry name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let width = read_u32(&mut r)?;
        if width != SCALAR_WIDTH {
            return Err(CliError::config(format!(
                "checkpoint load: unsupported scalar width {width}"
            )));
        }
        total += shape.iter().product::<usize>();
        entries.push((name, shape));
    }

    if let Some(model_cfg) = expect {
        let specs = param_specs(model_cfg);
        if specs.len() != entries.len() {
            return Err(CliError::config(format!(
                "checkpoint load: {} entries but the config expects {}",
                entries.len(),
                specs.len()
            )));
        }
        for (spec, (name, shape)) in specs.iter().zip(entries.iter()) {
            if &spec.name != name || &spec.shape != shape {
                return Err(CliError::config(format!(
                    "checkpoint load: entry '{name}' {shape:?} does not match expected \
                     '{}' {:?}",
                    spec.name, spec.shape
                )));
            }
        }
    }

    let mut flat = vec![0.0f64; total];
    let mut buf = [0u8; 8];
    for v in flat.iter_mut() {
        r.read_exact(&mut buf).map_err(io_err)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok((exp, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hqlt_core::model::{init_params, param_count};

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hqlt");
        let mut exp = ExperimentConfig::default();
        exp.model.d_model = 8;
        exp.model.n_heads = 2;
        exp.model.window = 3;
        exp.model.n_layers = 1;
        let cfg = exp.model_config().unwrap();
        let flat = init_params(&cfg, 3);
        save(&path, &exp, &cfg, &flat).unwrap();
        let (exp2, flat2) = load(&path, Some(&cfg)).unwrap();
        assert_eq!(exp, exp2);
        assert_eq!(flat, flat2);
        // Bytes are stable across save cycles.
        let path2 = dir.path().join("model2.hqlt");
        save(&path2, &exp2, &cfg, &flat2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hqlt");
        let mut exp = ExperimentConfig::default();
        exp.model.d_model = 8;
        exp.model.n_heads = 2;
        exp.model.n_layers = 1;
        let cfg = exp.model_config().unwrap();
        let flat = init_params(&cfg, 3);
        save(&path, &exp, &cfg, &flat).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path, Some(&cfg)).unwrap_err();
        assert!(err.message.contains("magic"));
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hqlt");
        let mut exp = ExperimentConfig::default();
        exp.model.d_model = 8;
        exp.model.n_heads = 2;
        exp.model.n_layers = 1;
        let cfg = exp.model_config().unwrap();
        let flat = init_params(&cfg, 3);
        save(&path, &exp, &cfg, &flat).unwrap();

        let mut other = exp.clone();
        other.model.n_layers = 2;
        let other_cfg = other.model_config().unwrap();
        let err = load(&path, Some(&other_cfg)).unwrap_err();
        assert_eq!(err.code, 1);
        assert_eq!(param_count(&other_cfg) > param_count(&cfg), true);
    }
}
