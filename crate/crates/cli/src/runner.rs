// Parallel batch execution: shards are assigned round-robin to a fixed
// worker count and returned in shard order, so results are bit-identical to
// the serial runner for any thread count.

use hqlt_core::error::Result;
use hqlt_core::model::ModelConfig;
use hqlt_core::tasks::TaskSample;
use hqlt_core::trainer::{run_shard, BatchRunner, ShardOut};

/// Thread count: the HQLT_THREADS environment variable, else the machine's
/// available parallelism.
pub fn default_threads() -> usize {
    if let Ok(v) = std::env::var("HQLT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

pub struct ThreadedRunner {
    pub threads: usize,
}

impl ThreadedRunner {
    pub fn from_env() -> Self {
        ThreadedRunner { threads: default_threads() }
    }
}

impl BatchRunner for ThreadedRunner {
    fn run(
        &self,
        cfg: &ModelConfig,
        flat: &[f64],
        shards: &[Vec<TaskSample>],
    ) -> Result<Vec<ShardOut>> {
        let workers = self.threads.max(1).min(shards.len().max(1));
        if workers <= 1 {
            return shards.iter().map(|s| run_shard(cfg, flat, s)).collect();
        }
        let mut collected: Vec<Option<Result<ShardOut>>> = Vec::new();
        collected.resize_with(shards.len(), || None);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut mine = Vec::new();
                        let mut i = w;
                        while i < shards.len() {
                            mine.push((i, run_shard(cfg, flat, &shards[i])));
                            i += workers;
                        }
                        mine
                    })
                })
                .collect();
            for h in handles {
                for (i, out) in h.join().expect("shard worker panicked") {
                    collected[i] = Some(out);
                }
            }
        });
        collected.into_iter().map(|o| o.expect("all shards ran")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hqlt_core::hybrid::{HybridLayerConfig, Variant};
    use hqlt_core::rng::Rng;
    use hqlt_core::tasks::TaskSpec;
    use hqlt_core::trainer::{make_shards, SerialRunner};

    #[test]
    fn threaded_matches_serial_bitwise() {
        let task = TaskSpec::parity();
        let layer = HybridLayerConfig::new(Variant::Synchronous, 8, 2, 4);
        let cfg = hqlt_core::model::ModelConfig::new(task.vocab_size(), 2, layer);
        let flat = hqlt_core::model::init_params(&cfg, 3);
        let mut rng = Rng::new(9);
        let batch: Vec<TaskSample> = (0..12).map(|_| task.sample_train(&mut rng)).collect();
        let shards = make_shards(batch, 5);

        let serial = SerialRunner.run(&cfg, &flat, &shards).unwrap();
        for threads in [1usize, 2, 3, 8] {
            let par = ThreadedRunner { threads }.run(&cfg, &flat, &shards).unwrap();
            assert_eq!(par.len(), serial.len());
            for (a, b) in par.iter().zip(serial.iter()) {
                assert_eq!(a.loss_sum.to_bits(), b.loss_sum.to_bits());
                assert_eq!(a.masked_count, b.masked_count);
                assert_eq!(a.grads, b.grads);
            }
        }
    }
}
