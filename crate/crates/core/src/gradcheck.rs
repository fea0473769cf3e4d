//! Central finite-difference verification of analytic gradients.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::layers::Ctx;
use crate::params::{normal, ParamId, ParamStore};
use crate::rng::{self, DuinRng};
use crate::tensor::Tensor;
use crate::Mode;

#[allow(unused_imports)]
use num_traits::Float;

/// Denominator floor of the relative error, so that vanishing gradients are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.into(), index));
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// Compares `analytic` against `(f(x+h·e_i) − f(x−h·e_i)) / 2h` at `coords`.
pub fn check_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport { tolerance, ..Default::default() };
    let mut probe = x.to_vec();
    for &i in coords {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        report.record("x", i, analytic[i], (up - down) / (2.0 * h));
    }
    report
}

/// Picks at most `max` distinct coordinates out of `n`, in ascending order.
pub fn sample_coords<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks every trainable tensor of `store` against the scalar built by `loss`.
///
/// `loss` must be deterministic (no dropout) for the check to be meaningful.
/// At most `max_coords` coordinates are probed per tensor.
pub fn check_params<R: Rng + ?Sized>(
    store: &mut ParamStore<f64>,
    mut loss: impl FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
    h: f64,
    tolerance: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    store.zero_grads();
    let mut g = Graph::new();
    let out = loss(store, &mut g)?;
    g.backward(out, store)?;
    let mut total = GradCheckReport { tolerance, ..Default::default() };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        let base = store.value(id).data().to_vec();
        let coords = sample_coords(base.len(), max_coords, rng);
        let name = store.get(id).name.clone();
        let mut report = GradCheckReport { tolerance, ..Default::default() };
        for &i in &coords {
            let mut eval = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = v;
                let mut g = Graph::new();
                let out = loss(store, &mut g)?;
                Ok(g.value(out).item())
            };
            let up = eval(base[i] + h, store)?;
            let down = eval(base[i] - h, store)?;
            store.get_mut(id).value.data_mut()[i] = base[i];
            report.record(&name, i, analytic[i], (up - down) / (2.0 * h));
        }
        total.merge(report);
    }
    store.zero_grads();
    Ok(total)
}

/// One entry of [`op_suite`].
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type LossFn = Box<dyn FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>>;

/// Reduces `out` to a scalar through fixed random weights, so every output
/// coordinate carries a distinct cotangent.
fn probe_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = normal(g.shape(out), 1.0, &mut rng::seeded(seed));
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut DuinRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.5);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

/// Gradient checks of every differentiable op and of the composed tiny encoder.
pub fn op_suite(h: f64, tolerance: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = rng::stream(seed, "gradcheck/inputs");
    let mut cases: Vec<(&'static str, ParamStore<f64>, LossFn)> = Vec::new();
    let store_with = |shapes: &[(&str, &[usize])], rng: &mut DuinRng| {
        let mut s = ParamStore::new();
        let ids: Vec<ParamId> = shapes.iter().map(|(n, sh)| s.add(*n, normal(sh, 1.0, rng), true)).collect();
        (s, ids)
    };

    macro_rules! case {
        ($name:expr, $shapes:expr, |$g:ident, $v:ident| $body:expr) => {{
            let (s, ids) = store_with($shapes, &mut rng);
            let f: LossFn = Box::new(move |st: &ParamStore<f64>, $g: &mut Graph<f64>| {
                let $v: Vec<Var> = ids.iter().map(|&id| $g.param(st, id)).collect();
                let out = $body?;
                probe_sum($g, out, 11)
            });
            cases.push(($name, s, f));
        }};
    }

    case!("add", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.add(v[0], v[1]));
    case!("sub", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.sub(v[0], v[1]));
    case!("mul", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.mul(v[0], v[1]));
    case!("scale", &[("a", &[5])], |g, v| Ok::<_, crate::Error>(g.scale(v[0], -1.7)));
    case!("add_broadcast", &[("a", &[2, 3, 4]), ("b", &[3, 4])], |g, v| g.add_broadcast(v[0], v[1]));
    case!("linear", &[("x", &[2, 3, 5]), ("w", &[5, 4]), ("b", &[4])], |g, v| g.linear(v[0], v[1], Some(v[2])));
    case!("bmm", &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])], |g, v| g.bmm(v[0], v[1], false));
    case!("bmm_trans_b", &[("a", &[2, 3, 4]), ("b", &[2, 5, 4])], |g, v| g.bmm(v[0], v[1], true));
    case!("reshape", &[("a", &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    case!("permute", &[("a", &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1]));
    case!("concat", &[("a", &[2, 3]), ("b", &[1, 3])], |g, v| g.concat(&[v[0], v[1]]));
    case!("conv1d", &[("x", &[2, 3, 11]), ("w", &[4, 3, 3]), ("b", &[4])], |g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1));
    case!("conv_transpose1d", &[("x", &[2, 3, 5]), ("w", &[3, 2, 4]), ("b", &[2])], |g, v| {
        g.conv_transpose1d(v[0], v[1], Some(v[2]), 3, 1, 2)
    });
    case!("batch_norm_train", &[("x", &[3, 2, 5]), ("gain", &[2]), ("bias", &[2])], |g, v| {
        g.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _)| y)
    });
    case!("batch_norm_infer", &[("x", &[3, 2, 5]), ("gain", &[2]), ("bias", &[2])], |g, v| {
        g.batch_norm_infer(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)
    });
    case!("layer_norm", &[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    case!("gelu", &[("a", &[4, 5])], |g, v| Ok::<_, crate::Error>(g.gelu(v[0])));
    case!("tanh", &[("a", &[4, 5])], |g, v| Ok::<_, crate::Error>(g.tanh(v[0])));
    case!("softmax", &[("a", &[3, 6])], |g, v| Ok::<_, crate::Error>(g.softmax(v[0])));
    case!("dropout", &[("a", &[4, 6])], |g, v| g.dropout(v[0], 0.3, &mut rng::seeded(5)));
    case!("mask_replace", &[("x", &[2, 3, 4]), ("token", &[4])], |g, v| {
        g.mask_replace(v[0], v[1], &[true, false, false, true, true, false])
    });
    case!("straight_through", &[("a", &[3, 4])], |g, v| {
        // Forward value tracks the source, so finite differences see the bypass map.
        let shifted = g.value(v[0]).map(|x| x + 0.25);
        g.straight_through(v[0], shifted)
    });
    case!("sum", &[("a", &[3, 4])], |g, v| Ok::<_, crate::Error>(g.sum(v[0])));
    case!("mean", &[("a", &[3, 4])], |g, v| Ok::<_, crate::Error>(g.mean(v[0])));
    case!("mse", &[("a", &[3, 4])], |g, v| {
        let t = normal(&[3, 4], 1.0, &mut rng::seeded(2));
        g.mse(v[0], &t)
    });
    case!("cross_entropy", &[("logits", &[4, 7])], |g, v| g.cross_entropy(v[0], &[0, 6, 3, 3]));
    case!("weighted_cross_entropy", &[("logits", &[4, 7])], |g, v| {
        g.weighted_cross_entropy(v[0], &[1, 2, 5, 0], &[0.5, 0.0, 0.25, 1.0])
    });

    {
        let mut s = ParamStore::new();
        let id = s.add("a", away_from_zero(&[4, 5], &mut rng), true);
        let f: LossFn = Box::new(move |st: &ParamStore<f64>, g: &mut Graph<f64>| {
            let a = g.param(st, id);
            let out = g.relu(a);
            probe_sum(g, out, 11)
        });
        cases.push(("relu", s, f));
    }

    {
        let cfg = config::tiny_encoder(3);
        let mut s = ParamStore::new();
        let enc = Encoder::new(&mut s, "encoder", &cfg, &mut rng::stream(seed, "gradcheck/encoder"))?;
        // Move off the initialization, where per-head query/key norms see near-constant rows.
        for p in s.iter_mut().filter(|p| p.trainable) {
            let noise = normal::<f64, _>(p.value.shape(), 0.3, &mut rng);
            p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
        let x = normal(&[2, 3, 40], 1.0, &mut rng);
        let f: LossFn = Box::new(move |st: &ParamStore<f64>, g: &mut Graph<f64>| {
            let mut r = rng::seeded(0);
            let mut cx = Ctx::new(st, Mode::Train, &mut r);
            let out = enc.forward(g, &mut cx, &x)?;
            probe_sum(g, out, 11)
        });
        cases.push(("tiny_encoder", s, f));
    }

    let mut out = Vec::with_capacity(cases.len());
    for (name, mut store, mut f) in cases {
        let report = check_params(&mut store, |s, g| f(s, g), h, tolerance, usize::MAX, &mut rng)?;
        out.push(OpCheck { name, report });
    }
    Ok(out)
}
