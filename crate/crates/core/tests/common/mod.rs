#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use textopt::bench::{fixed_task_evaluator, mismatch_fixer, string_task_evaluator, StringTask};
use textopt::engine::{Engine, EngineConfig};
use textopt::eval::{EvaluationCache, EvaluationHost, Evaluator, EvaluatorIdentity, FnEvaluator, HostConfig};
use textopt::model::{Example, SideInfo};
use textopt::proposer::Proposer;

pub const TARGET_12: &str = "optimization";

/// In-memory trajectory sink that can be inspected after the engine is done.
#[derive(Clone, Default)]
pub struct SharedBuf(pub Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

pub fn host(evaluator: Arc<dyn Evaluator>) -> EvaluationHost {
    EvaluationHost::new(evaluator, EvaluationCache::in_memory(), HostConfig::default())
}

pub fn fixer() -> Proposer {
    Proposer::scripted(mismatch_fixer())
}

/// The single-task prefix pipeline: seed "", fixer proposer, length-12 target.
pub fn prefix_engine(budget: u64, rng_seed: u64) -> Engine {
    let mut config = EngineConfig::new(budget).with_seed("");
    config.rng_seed = rng_seed;
    Engine::new(
        config,
        host(fixed_task_evaluator(StringTask::prefix(TARGET_12))),
        fixer(),
        None,
        None,
    )
    .unwrap()
}

pub fn multitask_engine(suite: Vec<Example>, budget: u64, rng_seed: u64, cache: EvaluationCache) -> Engine {
    let mut config = EngineConfig::new(budget).with_seed("");
    config.rng_seed = rng_seed;
    config.minibatch_size = 2;
    Engine::new(
        config,
        EvaluationHost::new(string_task_evaluator(), cache, HostConfig::default()),
        fixer(),
        Some(suite),
        None,
    )
    .unwrap()
}

/// Evaluator scoring texts from a lookup table keyed by (text, example id).
pub fn table_evaluator(table: BTreeMap<(String, String), f64>) -> Arc<dyn Evaluator> {
    Arc::new(FnEvaluator::new(
        EvaluatorIdentity::new("test.table", "1"),
        move |text, example| {
            let id = example.map(|e| e.id.clone()).unwrap_or_default();
            table
                .get(&(text.to_string(), id.clone()))
                .map(|s| (*s, SideInfo::new()))
                .ok_or_else(|| format!("no table entry for {text:?} on {id:?}"))
        },
    ))
}

/// Non-cached evaluator calls recorded in the engine's evaluation store.
pub fn uncached_calls(engine: &Engine) -> u64 {
    engine
        .records()
        .filter(|r| !r.from_cache)
        .map(|r| u64::from(r.evaluator_calls))
        .sum()
}
