//! Name-keyed registries for the interchangeable algorithm families:
//! channel grouping, weight quantization and the quantized forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::cluster::{KMeansGrouping, PerTensorGrouping, ReorderPlan, UniformGrouping};
use crate::error::{Error, Result};
use crate::qlinear::{
    ClusteredQuantLinear, DequantForward, GptqConfig, GptqQuantizer, IntegerForward,
    QuantizedWeights, RtnQuantizer,
};
use crate::quant::QuantParams;
use crate::tensor::{IntTensor, Tensor};

/// Partitions channels into contiguous clusters given their range signatures.
pub trait GroupingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn plan(&self, signatures: &[Vec<f64>], g: usize, seed: u64) -> Result<ReorderPlan>;
}

/// Quantizes a reordered `[out, in]` weight matrix per (input cluster, output channel).
pub trait WeightQuantizer: Send + Sync {
    fn name(&self) -> &'static str;
    /// `calib` holds reordered input activations `[M, in]`; quantizers that do
    /// not need them ignore it.
    fn quantize(
        &self,
        w: &Tensor,
        plan: &ReorderPlan,
        calib: Option<&Tensor>,
        bits: u8,
    ) -> Result<QuantizedWeights>;
}

/// Computes a clustered quantized linear layer from quantized activations.
pub trait ForwardMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(
        &self,
        xq: &IntTensor,
        act_params: &[QuantParams],
        layer: &ClusteredQuantLinear,
    ) -> Result<Tensor>;
}

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, item: Arc<T>) -> &mut Self {
        self.entries.insert(name, item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub fn grouping_strategies() -> Registry<dyn GroupingStrategy> {
    let mut r: Registry<dyn GroupingStrategy> = Registry::new("grouping strategy");
    for s in [
        Arc::new(KMeansGrouping::default()) as Arc<dyn GroupingStrategy>,
        Arc::new(UniformGrouping),
        Arc::new(PerTensorGrouping),
    ] {
        r.register(s.name(), s);
    }
    r
}

pub fn weight_quantizers(gptq: GptqConfig) -> Registry<dyn WeightQuantizer> {
    let mut r: Registry<dyn WeightQuantizer> = Registry::new("weight quantizer");
    for s in [
        Arc::new(RtnQuantizer) as Arc<dyn WeightQuantizer>,
        Arc::new(GptqQuantizer::new(gptq)),
    ] {
        r.register(s.name(), s);
    }
    r
}

pub fn forward_methods() -> Registry<dyn ForwardMethod> {
    let mut r: Registry<dyn ForwardMethod> = Registry::new("forward method");
    for s in [
        Arc::new(DequantForward) as Arc<dyn ForwardMethod>,
        Arc::new(IntegerForward),
    ] {
        r.register(s.name(), s);
    }
    r
}
