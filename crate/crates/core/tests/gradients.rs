//! Central-difference checks of every analytic gradient.

use mvinfo_core::nn::{self, EncoderSpec, Params, Tensor};
use mvinfo_core::objectives::{
    composite_loss, cpc_loss, fp_loss, ip_loss, js_loss, Components, Decoder, FpFlavor, LossOutput,
    LossWeights, PairBatch, Projection,
};
use mvinfo_core::rng;
use rand::Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;
/// Denominator floor so that gradients at zero compare absolutely.
const FLOOR: f64 = 1e-6;
const BATCHES: u64 = 20;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn gaussian(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn uniform(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(0.05..0.95)).collect()).unwrap()
}

/// Largest relative error of `grad` against central differences of `f` at `x`.
fn check<F: Fn(&Tensor) -> f64>(x: &Tensor, grad: &Tensor, f: F) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..x.data().len() {
        let mut up = x.clone();
        up.data_mut()[k] += STEP;
        let mut dn = x.clone();
        dn.data_mut()[k] -= STEP;
        let numeric = (f(&up) - f(&dn)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad.data()[k], numeric));
    }
    worst
}

fn with_tensor(p: &Params, k: usize, t: &Tensor) -> Params {
    let mut q = p.clone();
    q.tensors[k] = t.clone();
    q
}

fn batch(r: &mut rng::Rng) -> (usize, usize, Tensor, Tensor) {
    let n = r.gen_range(2..=8);
    let d = r.gen_range(2..=5);
    let zx = gaussian(r, n, d).scale(0.7);
    let zs = gaussian(r, n, d).scale(0.7);
    (n, d, zx, zs)
}

fn head(r: &mut rng::Rng, d: usize, linear: bool) -> Projection {
    if linear {
        let k = r.gen_range(1..=4);
        Projection::Linear {
            weight: gaussian(r, k, d).scale(0.5),
        }
    } else {
        Projection::Identity
    }
}

fn check_pair_objective<L>(loss: L, seed: u64)
where
    L: Fn(&PairBatch, &Projection) -> LossOutput,
{
    for b in 0..BATCHES {
        let mut r = rng::derived(seed, &[b]);
        let (_, _, zx, zs) = batch(&mut r);
        let h = head(&mut r, zx.cols(), b % 2 == 1);
        let out = loss(&PairBatch::new(zx.clone(), zs.clone()).unwrap(), &h);
        let value = |zx: &Tensor, zs: &Tensor, h: &Projection| {
            loss(&PairBatch::new(zx.clone(), zs.clone()).unwrap(), h).value
        };
        let ex = check(&zx, &out.grad_zx, |t| value(t, &zs, &h));
        let es = check(&zs, &out.grad_zs, |t| value(&zx, t, &h));
        assert!(ex <= REL_TOL && es <= REL_TOL, "batch {b}: {ex} {es}");
        if let (Projection::Linear { weight }, Some(g)) = (&h, &out.grad_head) {
            let eh = check(weight, g, |w| {
                value(&zx, &zs, &Projection::Linear { weight: w.clone() })
            });
            assert!(eh <= REL_TOL, "batch {b} head: {eh}");
        }
    }
}

#[test]
fn cpc_gradients() {
    check_pair_objective(|b, h| cpc_loss(b, h).unwrap(), 1);
}

#[test]
fn js_gradients() {
    check_pair_objective(|b, h| js_loss(b, h).unwrap(), 2);
}

#[test]
fn ip_gradients() {
    check_pair_objective(|b, _| ip_loss(b).unwrap(), 3);
}

fn decoder(r: &mut rng::Rng, d: usize, out: usize) -> Decoder {
    let spec = EncoderSpec::new(vec![d, 6, out], false).unwrap();
    let params = spec.init(r.gen());
    Decoder { spec, params }
}

fn check_fp(flavor: FpFlavor, seed: u64) {
    for b in 0..BATCHES {
        let mut r = rng::derived(seed, &[b]);
        let (n, d, zx, _) = batch(&mut r);
        let m = r.gen_range(1..=4);
        let target = match flavor {
            FpFlavor::Bce => uniform(&mut r, n, m),
            _ => gaussian(&mut r, n, m),
        };
        let dec = decoder(&mut r, d, m);
        let out = fp_loss(&zx, &target, &dec, flavor).unwrap();
        assert!(!out.clamped);
        let value = |zx: &Tensor, s: &Tensor, dec: &Decoder| fp_loss(zx, s, dec, flavor).unwrap().value;
        let ex = check(&zx, &out.grad_zx, |t| value(t, &target, &dec));
        let es = check(&target, &out.grad_zs, |t| value(&zx, t, &dec));
        assert!(ex <= REL_TOL && es <= REL_TOL, "{flavor:?} batch {b}: {ex} {es}");
        let grads = out.grad_decoder.unwrap();
        for (k, p) in dec.params.tensors.iter().enumerate() {
            let e = check(p, &grads.tensors[k], |t| {
                let d2 = Decoder {
                    spec: dec.spec.clone(),
                    params: with_tensor(&dec.params, k, t),
                };
                value(&zx, &target, &d2)
            });
            assert!(e <= REL_TOL, "{flavor:?} batch {b} decoder tensor {k}: {e}");
        }
    }
}

#[test]
fn fp_mse_gradients() {
    check_fp(FpFlavor::Mse, 4);
}

#[test]
fn fp_bce_gradients() {
    check_fp(FpFlavor::Bce, 5);
}

#[test]
fn fp_revbce_gradients() {
    check_fp(FpFlavor::Revbce, 6);
}

#[test]
fn composite_gradients() {
    for b in 0..BATCHES {
        let mut r = rng::derived(7, &[b]);
        let (n, d, zx, zs) = batch(&mut r);
        let target = gaussian(&mut r, n, 3);
        let dec = decoder(&mut r, d, 3);
        let h = head(&mut r, d, b % 2 == 0);
        let weights = LossWeights {
            cl: r.gen_range(0.5..2.0),
            fp: r.gen_range(0.0..10.0),
            ip: r.gen_range(0.0..1.0),
        };
        let total = |zx: &Tensor, zs: &Tensor| {
            let pair = PairBatch::new(zx.clone(), zs.clone()).unwrap();
            let cl = cpc_loss(&pair, &h).unwrap();
            let fp = fp_loss(zx, &target, &dec, FpFlavor::Mse).unwrap();
            let ip = ip_loss(&pair).unwrap();
            composite_loss(
                weights,
                Components {
                    cl: Some(&cl),
                    fp: Some(&fp),
                    ip: Some(&ip),
                },
            )
            .unwrap()
        };
        let out = total(&zx, &zs);
        let ex = check(&zx, &out.grad_zx, |t| total(t, &zs).value);
        let es = check(&zs, &out.grad_zs, |t| total(&zx, t).value);
        assert!(ex <= REL_TOL && es <= REL_TOL, "batch {b}: {ex} {es}");
    }
}

#[test]
fn encoder_gradients() {
    for b in 0..BATCHES {
        let mut r = rng::derived(8, &[b]);
        let n = r.gen_range(1..=5);
        let spec = EncoderSpec::new(vec![4, 7, 5, 3], b % 2 == 0).unwrap();
        // Jitter away from the zero-bias initialization, where an all-dead
        // hidden layer would put a row exactly at the normalization singularity.
        let mut params = spec.init(r.gen());
        for t in params.tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * r.sample::<f64, _>(StandardNormal));
        }
        let x = gaussian(&mut r, n, 4);
        let up = gaussian(&mut r, n, 3);
        let value = |p: &Params, x: &Tensor| nn::forward(&spec, p, x).unwrap().dot(&up);
        let g = nn::backward(&spec, &params, &x, &up).unwrap();
        let ei = check(&x, &g.input, |t| value(&params, t));
        assert!(ei <= REL_TOL, "batch {b} input: {ei}");
        for (k, p) in params.tensors.iter().enumerate() {
            let e = check(p, &g.params.tensors[k], |t| value(&with_tensor(&params, k, t), &x));
            assert!(e <= REL_TOL, "batch {b} tensor {k}: {e}");
        }
    }
}
