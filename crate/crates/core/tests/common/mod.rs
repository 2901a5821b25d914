//! Finite-difference oracle and small fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdet::autodiff::{ParamId, ParamStore, Tape, Var};
use stdet::geometry::{BoxDelta, HorizontalBox, OrientedBox};
use stdet::head::{head_loss, HeadConfig, LossWeights, StdHead};
use stdet::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Below this norm a gradient counts as zero; central differences carry
/// roughly `1e-16 / FD_STEP` of round-off, far below it.
pub const GRAD_FLOOR: f64 = 1e-7;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
///
/// The floor matters for parameters whose true gradient is exactly zero,
/// such as key biases (softmax ignores per-row shifts).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

/// Builds an expression from leaf variables.
/// `'p` bounds any parameter store the expression reads.
pub trait Build<'p>: Fn(&mut Tape<'p>, &[Var]) -> Result<Var> {}
impl<'p, F> Build<'p> for F where F: Fn(&mut Tape<'p>, &[Var]) -> Result<Var> {}

/// `Σ out ⊙ probe` for the expression evaluated at `inputs`.
fn probed_value<'p>(inputs: &[Tensor], build: &impl Build<'p>, probe: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out)
        .data()
        .iter()
        .zip(probe)
        .map(|(a, b)| a * b)
        .sum()
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences, over all inputs, of `Σ build(inputs) ⊙ probe` for a random probe.
pub fn grad_check<'p>(inputs: &[Tensor], build: impl Build<'p>, probe_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let probe = random_tensor(&mut rng(probe_seed), tape.shape(out), -1.0, 1.0);
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_STEP;
            let f = probed_value(&plus, &build, probe.data())
                - probed_value(&minus, &build, probe.data());
            numeric.push(f / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub struct HeadFixture {
    pub head: StdHead,
    pub store: ParamStore,
    pub tokens: Tensor,
    pub proposal: HorizontalBox,
    pub target: BoxDelta,
    pub label: usize,
}

pub fn head_fixture(config: HeadConfig, seed: u64) -> HeadFixture {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let head = StdHead::new(config, &mut store, &mut r).unwrap();
    let n = head.config().tokens();
    let tokens = random_tensor(&mut r, &[n, head.config().token_dim], 0.0, 1.0);
    let proposal = HorizontalBox::new(
        r.gen_range(20.0..100.0),
        r.gen_range(20.0..100.0),
        r.gen_range(10.0..40.0),
        r.gen_range(10.0..40.0),
    )
    .unwrap();
    let target = BoxDelta {
        dx: r.gen_range(-0.3..0.3),
        dy: r.gen_range(-0.3..0.3),
        dw: r.gen_range(-0.5..0.5),
        dh: r.gen_range(-0.5..0.5),
        dalpha: r.gen_range(-1.0..1.0),
    };
    let label = r.gen_range(0..head.config().logits());
    HeadFixture {
        head,
        store,
        tokens,
        proposal,
        target,
        label,
    }
}

impl HeadFixture {
    pub fn loss(&self, store: &ParamStore) -> f64 {
        let mut tape = Tape::new();
        let out = self
            .head
            .forward(&mut tape, store, &self.tokens, &self.proposal)
            .unwrap();
        let (_, terms) = head_loss(
            &mut tape,
            &out,
            Some(&self.target),
            self.label,
            &LossWeights::default(),
        )
        .unwrap();
        terms.total
    }

    /// Accumulated parameter gradients of the full loss.
    pub fn gradients(&self) -> ParamStore {
        let mut store = self.store.clone();
        let grads = {
            let mut tape = Tape::new();
            let out = self
                .head
                .forward(&mut tape, &self.store, &self.tokens, &self.proposal)
                .unwrap();
            let (loss, _) = head_loss(
                &mut tape,
                &out,
                Some(&self.target),
                self.label,
                &LossWeights::default(),
            )
            .unwrap();
            tape.backward(loss).unwrap()
        };
        store.zero_grads();
        store.accumulate(&grads);
        store
    }

    /// Central-difference derivative of the loss along one parameter coordinate.
    pub fn numeric(&self, id: ParamId, k: usize) -> f64 {
        let mut s = self.store.clone();
        let x = s.get(id).value.data()[k];
        s.get_mut(id).value.data_mut()[k] = x + FD_STEP;
        let plus = self.loss(&s);
        s.get_mut(id).value.data_mut()[k] = x - FD_STEP;
        let minus = self.loss(&s);
        (plus - minus) / (2.0 * FD_STEP)
    }

    /// Worst norm-wise relative error over `coords` random coordinates of every parameter tensor.
    pub fn check_all_params(&self, coords: usize, seed: u64) -> f64 {
        let g = self.gradients();
        let mut r = rng(seed);
        let mut worst = 0.0f64;
        for (id, p) in self.store.iter() {
            let n = p.value.numel();
            let picks: Vec<usize> = if n <= coords {
                (0..n).collect()
            } else {
                (0..coords).map(|_| r.gen_range(0..n)).collect()
            };
            let analytic: Vec<f64> = picks
                .iter()
                .map(|&k| g.get(id).grad.as_ref().unwrap().data()[k])
                .collect();
            let numeric: Vec<f64> = picks.iter().map(|&k| self.numeric(id, k)).collect();
            worst = worst.max(rel_err(&analytic, &numeric));
        }
        worst
    }
}

pub fn random_delta(r: &mut ChaCha8Rng) -> BoxDelta {
    BoxDelta {
        dx: r.gen_range(-1.0..1.0),
        dy: r.gen_range(-1.0..1.0),
        dw: r.gen_range(-1.5..1.5),
        dh: r.gen_range(-1.5..1.5),
        dalpha: r.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

pub fn random_proposal(r: &mut ChaCha8Rng) -> HorizontalBox {
    HorizontalBox::new(
        r.gen_range(-200.0..200.0),
        r.gen_range(-200.0..200.0),
        r.gen_range(2.0..300.0),
        r.gen_range(2.0..300.0),
    )
    .unwrap()
}

pub fn random_oriented(r: &mut ChaCha8Rng, centre: f64, size: (f64, f64)) -> OrientedBox {
    OrientedBox::new(
        r.gen_range(-centre..=centre),
        r.gen_range(-centre..=centre),
        r.gen_range(size.0..size.1),
        r.gen_range(size.0..size.1),
        r.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
    )
    .unwrap()
}

/// A ground-truth box and a proposal made from its jittered, rescaled hull.
pub fn random_gt_and_proposal(r: &mut ChaCha8Rng) -> (OrientedBox, HorizontalBox) {
    let g = random_oriented(r, 100.0, (4.0, 80.0));
    let hull = g.hull();
    let p = HorizontalBox::new(
        hull.x + r.gen_range(-0.3..0.3) * hull.w,
        hull.y + r.gen_range(-0.3..0.3) * hull.h,
        hull.w * r.gen_range(0.6..1.5),
        hull.h * r.gen_range(0.6..1.5),
    )
    .unwrap();
    (g, p)
}

/// Independent point-in-rectangle test: corners from the box parameters,
/// then same-side cross products along the closed boundary.
pub fn inside_quad(g: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = g.alpha.sin_cos();
    let corner = |u: f64, v: f64| (g.x + u * c - v * s, g.y + u * s + v * c);
    let (hw, hh) = (g.w / 2.0, g.h / 2.0);
    let q = [
        corner(-hw, -hh),
        corner(hw, -hh),
        corner(hw, hh),
        corner(-hw, hh),
    ];
    let crosses: Vec<f64> = (0..4)
        .map(|i| {
            let (a, b) = (q[i], q[(i + 1) % 4]);
            (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
        })
        .collect();
    crosses.iter().all(|&c| c >= 0.0) || crosses.iter().all(|&c| c <= 0.0)
}

/// Mask oracle: cell `(i, j)` is on iff its centre, mapped from the
/// proposal's `[-1,1]²` frame to image coordinates, lies inside `g`.
pub fn mask_oracle(g: &OrientedBox, p: &HorizontalBox, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let u = (2 * j + 1) as f64 / n as f64 - 1.0;
            let v = (2 * i + 1) as f64 / n as f64 - 1.0;
            let (x, y) = (p.x + u * p.w / 2.0, p.y + v * p.h / 2.0);
            out.push(if inside_quad(g, x, y) { 1.0 } else { 0.0 });
        }
    }
    out
}
