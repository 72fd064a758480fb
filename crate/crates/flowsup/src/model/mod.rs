//! The recurrent flow estimator and the flow-supervisor decoder.
//!
//! The student maps an image pair to a sequence of flow estimates. A shared
//! convolutional encoder produces 1/8-resolution feature and context maps;
//! an all-pairs correlation volume links the two frames; a conv-GRU update
//! block repeatedly looks up correlations around the current flow estimate
//! and emits a residual flow update. Flows are stored in full-resolution
//! pixel units at every resolution; only the correlation lookup converts to
//! coarse-cell units.
//!
//! The supervisor reuses the *same* update-block architecture with its own
//! parameter set. It consumes privileged inputs — the full uncropped frames
//! through the shared encoder — plus the student's zero-padded flow and
//! hidden state, all gradient-detached, and refines the student's estimate
//! into a pseudo-label.

mod checkpoint;

pub use checkpoint::Checkpoint;

use crate::autodiff::{
    concat_channels, conv2d, corr_lookup, upsample_bilinear, Arr, Gradients, Tape, Var,
};
use crate::{Error, Result};
use ndarray::{Array3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// How the student's hidden state reaches the supervisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PassHidden {
    /// Initialize the supervisor GRU state from the padded student state.
    #[default]
    Init,
    /// Feed the padded student state as extra motion-encoder channels
    /// (extra input weights start at zero so initialization-by-copy holds).
    Concat,
    /// Ignore the student state; the supervisor uses its own context init.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_channels: usize,
    pub hidden_channels: usize,
    pub context_channels: usize,
    pub corr_radius: usize,
    pub pass_hidden: PassHidden,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_channels: 32,
            hidden_channels: 32,
            context_channels: 32,
            corr_radius: 4,
            pass_hidden: PassHidden::Init,
        }
    }
}

/// Refinement iteration counts for the student and supervisor decoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationConfig {
    pub n_student: usize,
    pub m_supervisor: usize,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            n_student: 12,
            m_supervisor: 12,
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.n_student == 0 || self.m_supervisor == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            feat_channels: 8,
            hidden_channels: 8,
            context_channels: 8,
            corr_radius: 2,
            pass_hidden: PassHidden::Init,
        }
    }

    fn corr_channels(&self) -> usize {
        let k = 2 * self.corr_radius + 1;
        k * k
    }
}

/// Named parameter arrays. Student parameters carry encoder (`fenc.*`,
/// `cenc.*`) and update-block (`upd.*`) entries; supervisor parameters carry
/// only `upd.*`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Arr)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// Parameters registered as leaves on a tape for one forward/backward pass.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn bind(tape: &'t Tape, params: &ParamSet) -> Self {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), tape.var(value.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect this binding's gradients (zeros where no path touched them).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Arr> {
        self.vars
            .iter()
            .map(|(name, var)| (name.clone(), grads.get_or_zeros(*var)))
            .collect()
    }

    /// Names whose gradient is present (a path reached them).
    pub fn touched(&self, grads: &Gradients) -> Vec<String> {
        self.vars
            .iter()
            .filter(|(_, var)| grads.get(**var).is_some())
            .map(|(name, _)| name.clone())
            .collect()
    }
}

fn he_conv(rng: &mut ChaCha8Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Arr {
    let std = (2.0 / (kh * kw * cin) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(&[kh, kw, cin, cout]), |_| {
        // Box-Muller keeps us independent of distribution crates.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos() * std
    })
}

fn insert_conv(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, kh: usize, kw: usize, cin: usize, cout: usize) {
    params.insert(&format!("{name}.w"), he_conv(rng, kh, kw, cin, cout));
    params.insert(&format!("{name}.b"), Arr::zeros(IxDyn(&[cout])));
}

/// Update-block parameter entries for a given motion-encoder input width.
fn insert_update_block(params: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &ModelConfig, motion_in: usize) {
    let d = cfg.hidden_channels;
    let c = cfg.context_channels;
    insert_conv(params, rng, "upd.motion", 3, 3, motion_in, d);
    for gate in ["upd.gru_z", "upd.gru_r", "upd.gru_q"] {
        insert_conv(params, rng, gate, 3, 3, d + d + c, d);
    }
    insert_conv(params, rng, "upd.head1", 3, 3, d, d);
    insert_conv(params, rng, "upd.head2", 3, 3, d, 2);
}

/// Fresh student parameters (encoders + update block).
pub fn init_student_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let f = cfg.feat_channels;
    insert_conv(&mut p, rng, "fenc.c1", 3, 3, 3, f);
    insert_conv(&mut p, rng, "fenc.c2", 3, 3, f, f);
    insert_conv(&mut p, rng, "fenc.c3", 3, 3, f, f);
    let dc = cfg.hidden_channels + cfg.context_channels;
    insert_conv(&mut p, rng, "cenc.c1", 3, 3, 3, dc);
    insert_conv(&mut p, rng, "cenc.c2", 3, 3, dc, dc);
    insert_conv(&mut p, rng, "cenc.c3", 3, 3, dc, dc);
    insert_update_block(&mut p, rng, cfg, cfg.corr_channels() + 2);
    p
}

/// Copy the student's update-block weights into a fresh supervisor set.
///
/// In `Concat` mode the supervisor's motion encoder takes the padded student
/// hidden state as extra input channels; those weights start at zero so the
/// just-initialized supervisor computes exactly what the student would.
pub fn init_supervisor_from_student(student: &ParamSet, cfg: &ModelConfig) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, value) in student.iter() {
        if !name.starts_with("upd.") {
            continue;
        }
        if name == "upd.motion.w" && cfg.pass_hidden == PassHidden::Concat {
            let shape = value.shape();
            let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
            let mut expanded = Arr::zeros(IxDyn(&[kh, kw, cin + cfg.hidden_channels, cout]));
            let mut view = expanded
                .view_mut()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            view.slice_mut(ndarray::s![.., .., ..cin, ..]).assign(
                &value.view().into_dimensionality::<ndarray::Ix4>().unwrap(),
            );
            p.insert(name, expanded);
        } else {
            p.insert(name, value.clone());
        }
    }
    let expected = ["upd.motion.w", "upd.motion.b", "upd.gru_z.w", "upd.gru_q.w", "upd.head2.w"];
    for name in expected {
        if p.get(name).is_none() {
            return Err(Error::Config(format!(
                "student parameters lack update-block entry {name}"
            )));
        }
    }
    Ok(p)
}

fn conv<'t>(bp: &BoundParams<'t>, name: &str, x: Var<'t>, stride: usize) -> Var<'t> {
    conv2d(x, bp.get(&format!("{name}.w")), bp.get(&format!("{name}.b")), stride)
}

fn check_divisible(image: &Array3<f64>) -> Result<(usize, usize)> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Shape(format!("image sides must be multiples of 8, got {h}x{w}")));
    }
    Ok((h, w))
}

/// Run the feature encoder: `[H, W, 3] -> [H/8, W/8, F]`.
pub fn encode_features<'t>(
    tape: &'t Tape,
    bp: &BoundParams<'t>,
    image: &Array3<f64>,
) -> Result<Var<'t>> {
    check_divisible(image)?;
    let x = tape.var(image.clone().into_dyn());
    let h1 = conv(bp, "fenc.c1", x, 2).relu();
    let h2 = conv(bp, "fenc.c2", h1, 2).relu();
    Ok(conv(bp, "fenc.c3", h2, 2))
}

/// Run the context encoder and split into (initial hidden, context).
pub fn encode_context<'t>(
    tape: &'t Tape,
    bp: &BoundParams<'t>,
    cfg: &ModelConfig,
    image: &Array3<f64>,
) -> Result<(Var<'t>, Var<'t>)> {
    check_divisible(image)?;
    let x = tape.var(image.clone().into_dyn());
    let h1 = conv(bp, "cenc.c1", x, 2).relu();
    let h2 = conv(bp, "cenc.c2", h1, 2).relu();
    let out = conv(bp, "cenc.c3", h2, 2);
    let d = cfg.hidden_channels;
    let hidden0 = out.slice_channels(0, d).tanh();
    let ctx = out
        .slice_channels(d, d + cfg.context_channels)
        .relu();
    Ok((hidden0, ctx))
}

/// All-pairs correlation volume `[Hc, Wc, Hc, Wc]`, scaled by `1/sqrt(F)`.
pub fn correlation_volume<'t>(f1: Var<'t>, f2: Var<'t>) -> Result<Var<'t>> {
    let (s1, s2) = (f1.shape(), f2.shape());
    if s1 != s2 {
        return Err(Error::Shape(format!(
            "correlation_volume: feature shapes {s1:?} vs {s2:?}"
        )));
    }
    let (hc, wc, f) = (s1[0], s1[1], s1[2]);
    let p = hc * wc;
    let flat1 = f1.reshape(&[p, f]);
    let flat2 = f2.reshape(&[p, f]);
    let corr = flat1.matmul_nt(flat2).mul_scalar(1.0 / (f as f64).sqrt());
    Ok(corr.reshape(&[hc, wc, hc, wc]))
}

/// One conv-GRU refinement step. The incoming flow is treated as a constant
/// (detached), matching the refinement convention: gradients reach earlier
/// iterations only through the hidden state.
#[allow(clippy::too_many_arguments)]
fn update_step<'t>(
    tape: &'t Tape,
    bp: &BoundParams<'t>,
    cfg: &ModelConfig,
    corr4: Var<'t>,
    ctx: Var<'t>,
    h: Var<'t>,
    flow_in: &Arr,
    extra_motion_input: Option<Var<'t>>,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let flow_cells = flow_in.mapv(|v| v / 8.0);
    let corr_feat = corr_lookup(corr4, &flow_cells, cfg.corr_radius);
    let flow_var = tape.var(flow_cells);
    let mut motion_inputs = vec![corr_feat, flow_var];
    if let Some(extra) = extra_motion_input {
        motion_inputs.push(extra);
    }
    let motion = conv(bp, "upd.motion", concat_channels(&motion_inputs), 1).relu();
    let x = concat_channels(&[motion, ctx]);
    let hx = concat_channels(&[h, x]);
    let z = conv(bp, "upd.gru_z", hx, 1).sigmoid();
    let r = conv(bp, "upd.gru_r", hx, 1).sigmoid();
    let q = conv(bp, "upd.gru_q", concat_channels(&[r.mul(h), x]), 1).tanh();
    // h' = (1−z)·h + z·q, kept in (−1, 1) by construction.
    let h_new = h.add(z.mul(q.sub(h)));
    let delta = conv(bp, "upd.head2", conv(bp, "upd.head1", h_new, 1).relu(), 1);
    let flow_new = delta.add_arr(flow_in);
    (h_new, flow_new, delta)
}

/// Student outputs: per-iteration flows at coarse and full resolution plus
/// the final hidden state.
pub struct StudentOutput<'t> {
    pub flows_coarse: Vec<Var<'t>>,
    pub flows_full: Vec<Var<'t>>,
    pub deltas: Vec<Var<'t>>,
    pub hidden: Var<'t>,
    pub init_hidden: Var<'t>,
}

/// Supervisor outputs: refinement continues from the student's (padded)
/// flow; the last element is the pseudo-label.
pub struct SupervisorOutput<'t> {
    pub flows_coarse: Vec<Var<'t>>,
    pub flows_full: Vec<Var<'t>>,
    pub deltas: Vec<Var<'t>>,
    pub hidden: Var<'t>,
}

impl<'t> SupervisorOutput<'t> {
    /// Final full-resolution pseudo-label, detached from the graph.
    pub fn pseudo_label(&self) -> Arr {
        (*self.flows_full.last().expect("at least one step").value()).clone()
    }
}

fn check_finite(flow: &Arr, step: usize, who: &str) -> Result<()> {
    if flow.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{who} flow at refinement step {step}")));
    }
    Ok(())
}

/// Run the student: zero-initialized flow refined for `iters` steps.
pub fn student_forward<'t>(
    tape: &'t Tape,
    bp: &BoundParams<'t>,
    cfg: &ModelConfig,
    x1: &Array3<f64>,
    x2: &Array3<f64>,
    iters: usize,
) -> Result<StudentOutput<'t>> {
    if iters == 0 {
        return Err(Error::Config("student_forward needs iters >= 1".into()));
    }
    let f1 = encode_features(tape, bp, x1)?;
    let f2 = encode_features(tape, bp, x2)?;
    let corr4 = correlation_volume(f1, f2)?;
    let (h0, ctx) = encode_context(tape, bp, cfg, x1)?;

    let mut h = h0;
    let shape = h.shape();
    let mut flow_in: Arr = Arr::zeros(IxDyn(&[shape[0], shape[1], 2]));
    let mut flows_coarse = Vec::with_capacity(iters);
    let mut flows_full = Vec::with_capacity(iters);
    let mut deltas = Vec::with_capacity(iters);
    for step in 0..iters {
        let (h_new, flow_new, delta) = update_step(tape, bp, cfg, corr4, ctx, h, &flow_in, None);
        check_finite(&flow_new.value(), step, "student")?;
        h = h_new;
        flow_in = (*flow_new.value()).clone();
        flows_full.push(upsample_flow(flow_new));
        flows_coarse.push(flow_new);
        deltas.push(delta);
    }
    Ok(StudentOutput {
        flows_coarse,
        flows_full,
        deltas,
        hidden: h,
        init_hidden: h0,
    })
}

/// Run the flow supervisor on privileged full frames.
///
/// `flow_init` and `hidden_init` are the student's padded outputs at 1/8 of
/// the full resolution (plain arrays — already detached). The shared encoder
/// runs under the student's parameters but its outputs are detached, so
/// gradients of any supervisor loss reach the supervisor parameters only.
#[allow(clippy::too_many_arguments)]
pub fn supervisor_forward<'t>(
    tape: &'t Tape,
    student_bp: &BoundParams<'t>,
    supervisor_bp: &BoundParams<'t>,
    cfg: &ModelConfig,
    x1_full: &Array3<f64>,
    x2_full: &Array3<f64>,
    flow_init: &Array3<f64>,
    hidden_init: &Array3<f64>,
    iters: usize,
) -> Result<SupervisorOutput<'t>> {
    if iters == 0 {
        return Err(Error::Config("supervisor_forward needs iters >= 1".into()));
    }
    let (h, w) = check_divisible(x1_full)?;
    let (hc, wc) = (h / 8, w / 8);
    if flow_init.dim() != (hc, wc, 2) {
        return Err(Error::Shape(format!(
            "padded flow is {:?}, expected ({hc}, {wc}, 2)",
            flow_init.dim()
        )));
    }
    if hidden_init.dim() != (hc, wc, cfg.hidden_channels) {
        return Err(Error::Shape(format!(
            "padded hidden is {:?}, expected ({hc}, {wc}, {})",
            hidden_init.dim(),
            cfg.hidden_channels
        )));
    }

    let f1 = encode_features(tape, student_bp, x1_full)?.detach();
    let f2 = encode_features(tape, student_bp, x2_full)?.detach();
    let corr4 = correlation_volume(f1, f2)?;
    let (h0_own, ctx) = encode_context(tape, student_bp, cfg, x1_full)?;
    let ctx = ctx.detach();

    let mut h = match cfg.pass_hidden {
        PassHidden::Init => tape.var(hidden_init.clone().into_dyn()),
        PassHidden::Concat | PassHidden::Off => h0_own.detach(),
    };
    let extra = match cfg.pass_hidden {
        PassHidden::Concat => Some(tape.var(hidden_init.clone().into_dyn())),
        _ => None,
    };

    let mut flow_in: Arr = flow_init.clone().into_dyn();
    let mut flows_coarse = Vec::with_capacity(iters);
    let mut flows_full = Vec::with_capacity(iters);
    let mut deltas = Vec::with_capacity(iters);
    for step in 0..iters {
        let (h_new, flow_new, delta) =
            update_step(tape, supervisor_bp, cfg, corr4, ctx, h, &flow_in, extra);
        check_finite(&flow_new.value(), step, "supervisor")?;
        h = h_new;
        flow_in = (*flow_new.value()).clone();
        flows_full.push(upsample_flow(flow_new));
        flows_coarse.push(flow_new);
        deltas.push(delta);
    }
    Ok(SupervisorOutput {
        flows_coarse,
        flows_full,
        deltas,
        hidden: h,
    })
}

/// Upsample a coarse flow field to full resolution (x8 spatially; values are
/// already in full-resolution pixel units and are not rescaled).
pub fn upsample_flow(flow: Var<'_>) -> Var<'_> {
    upsample_bilinear(flow, 8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::data::{gen_synthetic_pair, BackgroundKind, Domain, SceneSpec};
    use ndarray::Array3;
    use rand::SeedableRng;

    fn test_image(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))
    }

    fn tiny_params(seed: u64) -> (ModelConfig, ParamSet) {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (cfg, init_student_params(&cfg, &mut rng))
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let (cfg, params) = tiny_params(1);
        let _ = cfg;
        let img = test_image(10, 24, 32);
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let fa = encode_features(&tape, &bp, &img).unwrap();
        let fb = encode_features(&tape, &bp, &img).unwrap();
        assert_eq!(fa.shape(), vec![3, 4, 8]);
        assert_eq!(&*fa.value(), &*fb.value());
    }

    #[test]
    fn encoder_rejects_unaligned_sizes() {
        let (_, params) = tiny_params(2);
        let img = test_image(11, 20, 32);
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        assert!(encode_features(&tape, &bp, &img).is_err());
    }

    #[test]
    fn encoder_is_translation_equivariant_on_interior() {
        let (_, params) = tiny_params(3);
        //

        // Build a 64x64 texture, and a copy shifted by 8 pixels; features
        // must shift by exactly one coarse cell on the interior.
        let spec = SceneSpec {
            height: 96,
            width: 96,
            background: BackgroundKind::Textured,
            object_count: 0,
            rng_seed: 9,
            ..SceneSpec::default()
        };
        let sample = gen_synthetic_pair(&spec, Domain::Source).unwrap();
        let full = sample.x1.pixels();
        let a = full.slice(ndarray::s![0..64, 0..64, ..]).to_owned();
        let b = full.slice(ndarray::s![0..64, 8..72, ..]).to_owned();
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let fa = encode_features(&tape, &bp, &a).unwrap();
        let fb = encode_features(&tape, &bp, &b).unwrap();
        let (va, vb) = (fa.value(), fb.value());
        // Interior: skip one cell at each border (padding effects).
        for i in 1..7 {
            for j in 1..6 {
                for c in 0..8 {
                    let lhs = va[[i, j + 1, c]];
                    let rhs = vb[[i, j, c]];
                    assert!(
                        (lhs - rhs).abs() < 1e-10,
                        "equivariance broke at ({i},{j},{c}): {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn correlation_matches_brute_force_oracle() {
        let (_, params) = tiny_params(4);
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let f1 = encode_features(&tape, &bp, &test_image(20, 16, 16)).unwrap();
        let f2 = encode_features(&tape, &bp, &test_image(21, 16, 16)).unwrap();
        let corr = correlation_volume(f1, f2).unwrap();
        let (v1, v2, vc) = (f1.value(), f2.value(), corr.value());
        let scale = 1.0 / (8.0f64).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let mut dot = 0.0;
                        for c in 0..8 {
                            dot += v1[[i, j, c]] * v2[[k, l, c]];
                        }
                        assert!((vc[[i, j, k, l]] - dot * scale).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn self_correlation_diagonal_dominates_and_orthogonal_is_zero() {
        // Hand-built features: distinct one-hot cells.
        let tape = Tape::new();
        let mut f = Arr::zeros(IxDyn(&[2, 2, 4]));
        for (idx, (i, j)) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            f[[*i, *j, idx]] = (idx + 1) as f64;
        }
        let fv = tape.var(f);
        let corr = correlation_volume(fv, fv).unwrap();
        let v = corr.value();
        for (idx, (i, j)) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            let self_corr = v[[*i, *j, *i, *j]];
            assert!((self_corr - ((idx + 1) * (idx + 1)) as f64 / 2.0).abs() < 1e-12);
            // Orthogonal feature vectors correlate to exactly zero.
            for (k, l) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
                if (k, l) != (*i, *j) {
                    assert_eq!(v[[*i, *j, k, l]], 0.0);
                }
            }
        }
    }

    #[test]
    fn student_forward_shapes_and_determinism() {
        let (cfg, params) = tiny_params(5);
        let (x1, x2) = (test_image(30, 32, 32), test_image(31, 32, 32));
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let out1 = student_forward(&tape, &bp, &cfg, &x1, &x2, 1).unwrap();
        assert_eq!(out1.flows_coarse.len(), 1);
        assert_eq!(out1.flows_full[0].shape(), vec![32, 32, 2]);

        let out3a = student_forward(&tape, &bp, &cfg, &x1, &x2, 3).unwrap();
        let tape2 = Tape::new();
        let bp2 = BoundParams::bind(&tape2, &params);
        let out3b = student_forward(&tape2, &bp2, &cfg, &x1, &x2, 3).unwrap();
        for (a, b) in out3a.flows_full.iter().zip(out3b.flows_full.iter()) {
            assert_eq!(&*a.value(), &*b.value());
        }
        // Bounded hidden state.
        assert!(out3a.hidden.value().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn residual_structure_is_exact() {
        let (cfg, params) = tiny_params(6);
        let (x1, x2) = (test_image(32, 32, 32), test_image(33, 32, 32));
        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let out = student_forward(&tape, &bp, &cfg, &x1, &x2, 4).unwrap();
        let mut prev = Arr::zeros(IxDyn(&[4, 4, 2]));
        for (flow, delta) in out.flows_coarse.iter().zip(out.deltas.iter()) {
            let expect = &prev + &*delta.value();
            assert_eq!(&*flow.value(), &expect);
            prev = (*flow.value()).clone();
        }
    }

    #[test]
    fn supervisor_with_zeroed_head_returns_input_flow() {
        let (cfg, params) = tiny_params(7);
        let mut sup = init_supervisor_from_student(&params, &cfg).unwrap();
        for name in ["upd.head2.w", "upd.head2.b"] {
            let z = Arr::zeros(sup.get(name).unwrap().raw_dim());
            sup.insert(name, z);
        }
        let (x1, x2) = (test_image(34, 32, 32), test_image(35, 32, 32));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let flow_init = Array3::from_shape_fn((4, 4, 2), |_| rng.random_range(-3.0..3.0));
        let hidden_init = Array3::from_shape_fn((4, 4, cfg.hidden_channels), |_| {
            rng.random_range(-0.9..0.9)
        });
        let tape = Tape::new();
        let sbp = BoundParams::bind(&tape, &params);
        let pbp = BoundParams::bind(&tape, &sup);
        let out =
            supervisor_forward(&tape, &sbp, &pbp, &cfg, &x1, &x2, &flow_init, &hidden_init, 3)
                .unwrap();
        assert_eq!(out.flows_coarse.len(), 3);
        for flow in &out.flows_coarse {
            assert_eq!(&*flow.value(), &flow_init.clone().into_dyn());
        }
    }

    #[test]
    fn supervisor_single_step_list_length() {
        let (cfg, params) = tiny_params(9);
        let sup = init_supervisor_from_student(&params, &cfg).unwrap();
        let (x1, x2) = (test_image(36, 32, 32), test_image(37, 32, 32));
        let tape = Tape::new();
        let sbp = BoundParams::bind(&tape, &params);
        let pbp = BoundParams::bind(&tape, &sup);
        let flow_init = Array3::zeros((4, 4, 2));
        let hidden_init = Array3::zeros((4, 4, cfg.hidden_channels));
        let out =
            supervisor_forward(&tape, &sbp, &pbp, &cfg, &x1, &x2, &flow_init, &hidden_init, 1)
                .unwrap();
        assert_eq!(out.flows_full.len(), 1);
    }

    #[test]
    fn supervisor_rejects_mismatched_padding() {
        let (cfg, params) = tiny_params(10);
        let sup = init_supervisor_from_student(&params, &cfg).unwrap();
        let (x1, x2) = (test_image(38, 32, 32), test_image(39, 32, 32));
        let tape = Tape::new();
        let sbp = BoundParams::bind(&tape, &params);
        let pbp = BoundParams::bind(&tape, &sup);
        let flow_init = Array3::zeros((8, 8, 2)); // wrong resolution
        let hidden_init = Array3::zeros((4, 4, cfg.hidden_channels));
        assert!(supervisor_forward(
            &tape, &sbp, &pbp, &cfg, &x1, &x2, &flow_init, &hidden_init, 1
        )
        .is_err());
    }

    #[test]
    fn init_copies_update_block_and_separates_ownership() {
        let (cfg, params) = tiny_params(11);
        let mut sup = init_supervisor_from_student(&params, &cfg).unwrap();
        for name in ["upd.motion.w", "upd.gru_z.w", "upd.head2.b"] {
            assert_eq!(sup.get(name).unwrap(), params.get(name).unwrap());
        }
        // Mutating the copy leaves the student untouched.
        let before = params.get("upd.gru_z.w").unwrap().clone();
        let mut w = sup.get("upd.gru_z.w").unwrap().clone();
        w += 1.0;
        sup.insert("upd.gru_z.w", w);
        assert_eq!(params.get("upd.gru_z.w").unwrap(), &before);
        assert_ne!(sup.get("upd.gru_z.w").unwrap(), &before);
    }

    #[test]
    fn freshly_initialized_supervisor_reproduces_student() {
        let (cfg, params) = tiny_params(12);
        let sup = init_supervisor_from_student(&params, &cfg).unwrap();
        let (x1, x2) = (test_image(40, 40, 48), test_image(41, 40, 48));
        let iters = 4;

        let tape = Tape::new();
        let bp = BoundParams::bind(&tape, &params);
        let student = student_forward(&tape, &bp, &cfg, &x1, &x2, iters).unwrap();

        let tape2 = Tape::new();
        let sbp = BoundParams::bind(&tape2, &params);
        let pbp = BoundParams::bind(&tape2, &sup);
        let zero_flow = Array3::zeros((5, 6, 2));
        let h0 = student.init_hidden.value();
        let h0_arr = h0
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let supervisor = supervisor_forward(
            &tape2, &sbp, &pbp, &cfg, &x1, &x2, &zero_flow, &h0_arr, iters,
        )
        .unwrap();

        for (sf, pf) in student
            .flows_coarse
            .iter()
            .zip(supervisor.flows_coarse.iter())
        {
            let (a, b) = (sf.value(), pf.value());
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12, "equivalence broke: {x} vs {y}");
            }
        }
    }

    #[test]
    fn supervisor_losses_never_touch_student_parameters() {
        let (cfg, params) = tiny_params(13);
        let sup = init_supervisor_from_student(&params, &cfg).unwrap();
        let (x1, x2) = (test_image(42, 32, 32), test_image(43, 32, 32));
        let tape = Tape::new();
        let sbp = BoundParams::bind(&tape, &params);
        let pbp = BoundParams::bind(&tape, &sup);
        let flow_init = Array3::zeros((4, 4, 2));
        let hidden_init = Array3::zeros((4, 4, cfg.hidden_channels));
        let out =
            supervisor_forward(&tape, &sbp, &pbp, &cfg, &x1, &x2, &flow_init, &hidden_init, 2)
                .unwrap();
        let loss = out.flows_full.last().unwrap().mul(*out.flows_full.last().unwrap()).sum();
        let grads = backward(loss);
        assert!(sbp.touched(&grads).is_empty(), "student params must stay isolated");
        assert!(!pbp.touched(&grads).is_empty(), "supervisor params must receive gradient");
    }

    #[test]
    fn upsample_flow_cases() {
        let tape = Tape::new();
        // Constant coarse flow stays constant at full resolution.
        let constant = tape.var(Arr::from_elem(IxDyn(&[4, 4, 2]), 0.0));
        let mut c = (*constant.value()).clone();
        c.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let constant = tape.var(c);
        let up = upsample_flow(constant);
        for v in up.value().slice(ndarray::s![.., .., 0]).iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        for v in up.value().slice(ndarray::s![.., .., 1]).iter() {
            assert_eq!(*v, 0.0);
        }

        // Zero flow upsamples to zero.
        let zero = tape.var(Arr::zeros(IxDyn(&[3, 5, 2])));
        assert!(upsample_flow(zero).value().iter().all(|&v| v == 0.0));

        // Linear ramp matches an independent bilinear oracle.
        let ramp = tape.var(Arr::from_shape_fn(IxDyn(&[4, 6, 2]), |ix| {
            ix[1] as f64 * 2.0 + ix[0] as f64 - ix[2] as f64
        }));
        let up = upsample_flow(ramp);
        let src = ramp.value();
        let upv = up.value();
        for i in 0..32 {
            for j in 0..48 {
                for ch in 0..2 {
                    // Oracle: half-pixel-center bilinear interpolation.
                    let sx = ((j as f64 + 0.5) / 8.0 - 0.5).clamp(0.0, 5.0);
                    let sy = ((i as f64 + 0.5) / 8.0 - 0.5).clamp(0.0, 3.0);
                    let (x0, y0) = ((sx.floor() as usize).min(4), (sy.floor() as usize).min(2));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let oracle = (1.0 - fy)
                        * ((1.0 - fx) * src[[y0, x0, ch]] + fx * src[[y0, x0 + 1, ch]])
                        + fy * ((1.0 - fx) * src[[y0 + 1, x0, ch]]
                            + fx * src[[y0 + 1, x0 + 1, ch]]);
                    assert!((upv[[i, j, ch]] - oracle).abs() < 1e-6);
                }
            }
        }
    }
}
