//! Shared test oracles.
#![allow(dead_code)]

use stnet::tensor::{Graph, ParamStore, Tensor, Var};
use stnet::Result;

pub const FD_EPS: f64 = 1e-4;
/// Floor on the denominator of the relative error so that gradients which
/// are zero on both sides do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl FdReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel {
            self.max_rel = rel;
            self.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
    }

    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// Compare analytic gradients against central differences for every element
/// of every parameter in `store` and every tensor in `inputs`.
///
/// `build` must construct the scalar loss from scratch; the finite-difference
/// side only ever calls it forward.
pub fn fd_check<F>(store: &ParamStore, inputs: &[Tensor], build: F) -> FdReport
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, store, &vars).expect("forward");
        g.value(loss).data()[0]
    };

    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &analytic, &vars).expect("forward");
    let grads = g.backward(loss, &mut analytic, 1.0).expect("backward");

    let mut report = FdReport::default();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let n = store.get(name).unwrap().len();
        for i in 0..n {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += FD_EPS;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus, inputs) - eval(&minus, inputs)) / (2.0 * FD_EPS);
            let a = analytic.grad(name).unwrap().data()[i];
            report.record(format!("{name}[{i}]"), a, numeric);
        }
    }
    for (k, t) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let ga = grads.get(vars[k]).unwrap_or(&zero);
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_EPS;
            let numeric = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_EPS);
            report.record(format!("input{k}[{i}]"), ga.data()[i], numeric);
        }
    }
    report
}

/// Deterministic uniform values in [-1, 1).
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
