use crate::error::{Error, Result};
use crate::models::{classify, classify_soft, Image};
use crate::numerics::NetModel;

/// Query interface to the system under attack. Every call increments the
/// query counter exactly once, successful or not.
pub trait Oracle {
    fn hard(&mut self, image: &Image) -> Result<usize>;

    fn soft(&mut self, _image: &Image) -> Result<Vec<f64>> {
        Err(Error::InvalidInput("soft-label mode unavailable".into()))
    }

    fn queries(&self) -> u64;

    /// Detections attributed to this oracle's accounts so far.
    fn detections(&self) -> u64 {
        0
    }

    fn classes(&self) -> usize;
}

/// Defenseless direct-model oracle (no monitor, never bans).
pub struct ModelOracle<'a> {
    model: &'a NetModel,
    soft_enabled: bool,
    queries: u64,
}

impl<'a> ModelOracle<'a> {
    pub fn new(model: &'a NetModel) -> Self {
        Self { model, soft_enabled: false, queries: 0 }
    }

    pub fn with_soft(model: &'a NetModel) -> Self {
        Self { model, soft_enabled: true, queries: 0 }
    }
}

impl Oracle for ModelOracle<'_> {
    fn hard(&mut self, image: &Image) -> Result<usize> {
        self.queries += 1;
        classify(self.model, image)
    }

    fn soft(&mut self, image: &Image) -> Result<Vec<f64>> {
        self.queries += 1;
        if !self.soft_enabled {
            return Err(Error::InvalidInput("soft-label mode disabled".into()));
        }
        classify_soft(self.model, image)
    }

    fn queries(&self) -> u64 {
        self.queries
    }

    fn classes(&self) -> usize {
        self.model.output_dim()
    }
}
