//! Shape laws of the reference geometry and the straight-through contract.

use duin_core::config::{full_encoder, full_vqvae, tiny_vqvae};
use duin_core::encoder::Encoder;
use duin_core::layers::Ctx;
use duin_core::params::normal;
use duin_core::vqvae::Vqvae;
use duin_core::{rng, Graph, Mode, ParamStore, Tensor};

#[test]
fn three_seconds_become_thirty_tokens_of_width_160() {
    let cfg = full_encoder(10);
    assert_eq!(cfg.embed_dim().unwrap(), 160);
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::new(&mut store, "encoder", &cfg, &mut rng::seeded(0)).unwrap();
    let x: Tensor<f32> = normal(&[1, 10, 3000], 1.0, &mut rng::seeded(1));
    let mut r = rng::seeded(2);
    let mut cx = Ctx::new(&store, Mode::Infer, &mut r);
    let mut g = Graph::new();
    let e = enc.forward(&mut g, &mut cx, &x).unwrap();
    assert_eq!(g.shape(e), &[1, 30, 160]);
    // Trailing samples short of a full patch are dropped.
    let x: Tensor<f32> = normal(&[1, 10, 3099], 1.0, &mut rng::seeded(1));
    let e = enc.forward(&mut g, &mut cx, &x).unwrap();
    assert_eq!(g.shape(e), &[1, 30, 160]);
}

#[test]
fn regressor_maps_forty_tokens_to_four_seconds() {
    let cfg = full_vqvae(10);
    let mut store = ParamStore::<f32>::new();
    let model = Vqvae::new(&mut store, &cfg, &mut rng::seeded(0)).unwrap();
    let emb: Tensor<f32> = normal(&[1, 40, 160], 1.0, &mut rng::seeded(1));
    let mut r = rng::seeded(2);
    let mut cx = Ctx::new(&store, Mode::Infer, &mut r);
    let mut g = Graph::new();
    let v = g.constant(emb);
    let y = model.regress(&mut g, &mut cx, v).unwrap();
    assert_eq!(g.shape(y), &[1, 10, 4000]);
}

struct Fixture {
    store: ParamStore<f64>,
    model: Vqvae,
    x: Tensor<f64>,
}

fn fixture(beta: f64) -> Fixture {
    let mut cfg = tiny_vqvae(3);
    cfg.quantizer.beta = beta;
    let mut store = ParamStore::new();
    let model = Vqvae::new(&mut store, &cfg, &mut rng::seeded(7)).unwrap();
    let x = normal(&[2, 3, 40], 1.0, &mut rng::seeded(8));
    Fixture { store, model, x }
}

#[test]
fn reconstruction_gradient_passes_straight_through() {
    let Fixture { store, model, x } = fixture(0.25);
    let mut r = rng::seeded(0);
    let mut cx = Ctx::new(&store, Mode::Train, &mut r);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &mut cx, &x).unwrap();
    let loss = model.loss(&mut g, &fwd, &x).unwrap();
    let grads = g.gradients(loss.recon).unwrap();
    let at_st = grads.get(fwd.quant.z_st).unwrap();
    let at_c = grads.get(fwd.quant.z_c).unwrap();
    assert!(at_st.iter().any(|&v| v != 0.0));
    assert_eq!(at_st, at_c, "the lookup must be the identity in the backward pass");
    // The forward value is the selected codex row, not the query.
    let codex = store.value(model.quantizer.codex).data();
    let d = model.quantizer.cfg.d_codex;
    for (row, &i) in g.value(fwd.quant.z_st).data().chunks(d).zip(&fwd.quant.result.indices) {
        assert_eq!(row, &codex[i * d..(i + 1) * d]);
    }
}

#[test]
fn commit_term_pulls_queries_only() {
    let beta = 0.25;
    let Fixture { mut store, model, x } = fixture(beta);
    let mut r = rng::seeded(0);
    let (codebook, total, commit_grad, zc, q) = {
        let mut cx = Ctx::new(&store, Mode::Train, &mut r);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &mut cx, &x).unwrap();
        let loss = model.loss(&mut g, &fwd, &x).unwrap();
        let cg = g.gradients(loss.commit).unwrap().get(fwd.quant.z_c).unwrap().to_vec();
        let zc = g.value(fwd.quant.z_c).data().to_vec();
        let q = fwd.quant.result.quantized.data().to_vec();
        g.backward(loss.total, &mut store).unwrap();
        (fwd.quant.terms.codebook, g.value(loss.total).item(), cg, zc, q)
    };
    assert!(codebook > 0.0 && total.is_finite());
    // d/dz of beta * mean((z - q)^2) with q held constant.
    let n = zc.len() as f64;
    for ((gv, z), qv) in commit_grad.iter().zip(&zc).zip(&q) {
        let want = 2.0 * beta * (z - qv) / n;
        assert!((gv - want).abs() <= 1e-12 * (1.0 + want.abs()), "{gv} vs {want}");
    }
    // The codex moves only through the moving average, never through gradients.
    assert!(store.grad(model.quantizer.codex).data().iter().all(|&v| v == 0.0));
    assert!(!store.get(model.quantizer.codex).trainable);
}

#[test]
fn zero_beta_removes_the_commit_term() {
    let Fixture { store, model, x } = fixture(0.0);
    let mut r = rng::seeded(0);
    let mut cx = Ctx::new(&store, Mode::Train, &mut r);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &mut cx, &x).unwrap();
    let loss = model.loss(&mut g, &fwd, &x).unwrap();
    assert_eq!(g.value(loss.commit).item(), 0.0);
    assert_eq!(g.value(loss.total).item(), g.value(loss.recon).item());
    assert!(fwd.quant.terms.codebook > 0.0);
}
