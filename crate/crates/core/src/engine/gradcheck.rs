use super::{Graph, NodeId, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn violations(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, for every coordinate of every parameter in `store`.
///
/// `f` must be deterministic: any noise has to be fixed outside it.
pub fn grad_check<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    g.backward(out)?.accumulate_into(&mut analytic);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for (id, p) in store.iter() {
        let mut check = ParamCheck {
            name: p.name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.value.len() {
            let x = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = x + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = x;

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(id).grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            if err > check.max_rel_error || i == 0 {
                check = ParamCheck {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                    ..check
                };
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}
