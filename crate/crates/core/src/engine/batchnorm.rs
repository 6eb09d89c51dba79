use super::{BatchStats, Graph, NodeId, ParamId, ParamStore, Result, Tensor};

/// Batch normalization over features, with running statistics for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Registers `<name>.scale` (ones) and `<name>.shift` (zeros).
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let scale = store.add(format!("{name}.scale"), Tensor::filled(&[features], 1.0));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(&[features]));
        Self {
            scale,
            shift,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Batch statistics when `training`, running statistics otherwise. The
    /// running averages are not touched here; feed the returned stats to
    /// [`BatchNormState::update`] once the step is accepted.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        training: bool,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let scale = g.param(store, self.scale)?;
        let shift = g.param(store, self.shift)?;
        if training {
            let (y, stats) = g.batch_norm_train(x, scale, shift, self.eps)?;
            return Ok((y, Some(stats)));
        }
        let f = self.features();
        let neg_mean = g.constant(Tensor::matrix(1, f, self.running_mean.iter().map(|m| -m).collect())?)?;
        let inv_std = g.constant(Tensor::matrix(
            1,
            f,
            self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
        )?)?;
        let centered = g.add_row(x, neg_mean)?;
        let normed = g.mul_row(centered, inv_std)?;
        let scaled = g.mul_row(normed, scale)?;
        Ok((g.add_row(scaled, shift)?, None))
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}
