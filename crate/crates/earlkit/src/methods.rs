//! Runtime-selectable labeling strategies.
//!
//! Every strategy implements one trait and registers under a stable name, so
//! configs and the command line pick algorithms by string without the caller
//! matching on variants. Callers may register their own strategies next to
//! the built-ins.

use std::collections::BTreeMap;

use crate::baseline::run_baseline;
use crate::pipeline::{run_alpaca, run_direct_gvlm, run_earl, PipelineError, PredictionSet, RunContext};

/// One labeling strategy, selectable by name.
pub trait LabelingMethod: Send + Sync {
    /// Registry key; also the method tag stamped on every prediction.
    fn name(&self) -> &'static str;

    /// One line for `--method` listings.
    fn describe(&self) -> &'static str;

    fn run(&self, ctx: &RunContext) -> Result<PredictionSet, PipelineError>;
}

struct TwoStageMethod;

impl LabelingMethod for TwoStageMethod {
    fn name(&self) -> &'static str {
        "genearl"
    }
    fn describe(&self) -> &'static str {
        "two-stage generative prompting: describe each object with the vision model, then label each image batch with one chat call (supports k-shot exemplars)"
    }
    fn run(&self, ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
        run_earl(ctx)
    }
}

struct DirectGvlmMethod;

impl LabelingMethod for DirectGvlmMethod {
    fn name(&self) -> &'static str {
        "direct-gvlm"
    }
    fn describe(&self) -> &'static str {
        "single-stage multimodal labeling: the vision model scores candidate roles directly (zero-shot only)"
    }
    fn run(&self, ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
        run_direct_gvlm(ctx)
    }
}

struct AlpacaMethod;

impl LabelingMethod for AlpacaMethod {
    fn name(&self) -> &'static str {
        "alpaca"
    }
    fn describe(&self) -> &'static str {
        "candidate-scoring over the single-object text prompt, one call per object (zero-shot only)"
    }
    fn run(&self, ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
        run_alpaca(ctx)
    }
}

struct BaselineMethod;

impl LabelingMethod for BaselineMethod {
    fn name(&self) -> &'static str {
        "baseline"
    }
    fn describe(&self) -> &'static str {
        "zero-shot classification by cosine similarity between region embeddings and role template sentences"
    }
    fn run(&self, ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
        run_baseline(ctx)
    }
}

/// Name-keyed strategy registry.
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn LabelingMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> MethodRegistry {
        MethodRegistry {
            methods: BTreeMap::new(),
        }
    }

    /// Registry preloaded with the four shipped strategies.
    pub fn with_builtins() -> MethodRegistry {
        let mut registry = MethodRegistry::empty();
        registry.register(Box::new(TwoStageMethod));
        registry.register(Box::new(DirectGvlmMethod));
        registry.register(Box::new(AlpacaMethod));
        registry.register(Box::new(BaselineMethod));
        registry
    }

    /// Registers a strategy, replacing any previous one of the same name.
    pub fn register(&mut self, method: Box<dyn LabelingMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Option<&dyn LabelingMethod> {
        self.methods.get(name).map(|boxed| boxed.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }

    /// Dispatches by name; unknown names list what is available.
    pub fn run(&self, name: &str, ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
        let method = self.get(name).ok_or_else(|| {
            PipelineError::Validation(format!(
                "unknown method {:?}; available: {}",
                name,
                self.names().join(", ")
            ))
        })?;
        method.run(ctx)
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        MethodRegistry::with_builtins()
    }
}
