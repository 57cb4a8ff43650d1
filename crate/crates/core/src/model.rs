//! Inference-time view of a trained network as seen by the detectors.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::nn::{backward, forward, ParamSet};
use crate::strategies::BicLayer;

/// What a post-hoc detector may query: features, the linear head, and (optionally) input
/// gradients. Logits returned here include any output calibration layer.
pub trait Model {
    fn features(&self, x: &[f64]) -> Result<DVector<f64>>;

    fn head_weight(&self) -> &DMatrix<f64>;

    fn head_bias(&self) -> &DVector<f64>;

    fn adjust_logits(&self, logits: DVector<f64>) -> DVector<f64> {
        logits
    }

    fn logits_from_features(&self, h: &DVector<f64>) -> DVector<f64> {
        self.adjust_logits(self.head_weight() * h + self.head_bias())
    }

    fn logits(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.logits_from_features(&self.features(x)?))
    }

    /// Gradient with respect to `x` of a loss whose gradient with respect to the (adjusted)
    /// logits is `upstream(logits)`. `None` when the model cannot differentiate its input.
    fn input_gradient(
        &self,
        _x: &[f64],
        _upstream: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    ) -> Result<Option<DVector<f64>>> {
        Ok(None)
    }
}

/// A parameter set plus an optional bias-correction layer on its outputs.
#[derive(Clone, Copy, Debug)]
pub struct Network<'a> {
    pub params: &'a ParamSet,
    pub bic: Option<&'a BicLayer>,
}

impl<'a> Network<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Network { params, bic: None }
    }

    pub fn with_bic(params: &'a ParamSet, bic: Option<&'a BicLayer>) -> Self {
        Network { params, bic }
    }
}

impl Model for Network<'_> {
    fn features(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.params.features(x)
    }

    fn head_weight(&self) -> &DMatrix<f64> {
        &self.params.head_weight
    }

    fn head_bias(&self) -> &DVector<f64> {
        &self.params.head_bias
    }

    fn adjust_logits(&self, logits: DVector<f64>) -> DVector<f64> {
        match self.bic {
            Some(b) => b.apply(&logits),
            None => logits,
        }
    }

    fn input_gradient(
        &self,
        x: &[f64],
        upstream: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    ) -> Result<Option<DVector<f64>>> {
        let rec = forward(self.params, x)?;
        let adjusted = self.adjust_logits(rec.logits.clone());
        let mut d = upstream(&adjusted);
        if let Some(b) = self.bic {
            d = b.backward(&d);
        }
        Ok(Some(backward(self.params, &rec, &d).input))
    }
}
