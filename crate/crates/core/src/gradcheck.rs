//! Finite-difference verification of the tape's analytic gradients.
//!
//! Each case maps some input tensors to an output; the scalar under test is
//! `Σ out ⊙ R` for a fixed random `R`, which exercises every output
//! element with a distinct weight. Central differences run in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionLayer, AttentionVariant, LgaConfig, PosEncoding};
use crate::autograd::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BlockSpec, Model, ModelConfig, ResBlock, ResBlockSpec, TransformerBlock};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to round-off are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    /// Inputs with at most this many elements are checked exhaustively;
    /// larger ones on an evenly spaced subset of this size.
    pub max_checked: usize,
    build: Build,
}

impl Case {
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Case {
            name: name.into(),
            inputs,
            max_checked: usize::MAX,
            build: Box::new(build),
        }
    }

    pub fn with_max_checked(mut self, n: usize) -> Self {
        self.max_checked = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSpec {
    #[serde(default = "d_tol")]
    pub tolerance: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_tol() -> f64 {
    DEFAULT_TOLERANCE
}
fn d_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        GradcheckSpec {
            tolerance: DEFAULT_TOLERANCE,
            eps: DEFAULT_EPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub eps: f64,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>14}  {:>8}  result\n", "case", "max_rel_error", "checked");
        for c in &self.cases {
            out += &format!(
                "{:<width$}  {:>14.3e}  {:>8}  {}\n",
                c.name,
                c.max_rel_error,
                c.checked,
                if c.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    tape.sum_all(prod)
}

fn checked_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max).map(|i| i * len / max).collect();
    idx.dedup();
    idx
}

/// Run one case. `fault` corrupts the backward rule of one op kind.
pub fn check_case(case: &Case, spec: &GradcheckSpec, fault: Option<OpKind>) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED);
    // Analytic pass; also fixes the output shape for R.
    let mut tape = Tape::new();
    tape.inject_backward_fault(fault);
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let r = random_weights(tape.shape(out), &mut rng);
    let loss = weighted_sum(&mut tape, out, &r)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let o = (case.build)(&mut t, &vs)?;
        let l = weighted_sum(&mut t, o, &r)?;
        Ok(t.value(l).item())
    };

    let mut inputs = case.inputs.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in checked_indices(case.inputs[i].len(), case.max_checked) {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + spec.eps;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - spec.eps;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * spec.eps);
            max_rel = max_rel.max(relative_error(analytic.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(CaseResult {
        name: case.name.clone(),
        max_rel_error: max_rel,
        checked,
        passed: max_rel <= spec.tolerance,
    })
}

pub fn run(cases: &[Case], spec: &GradcheckSpec, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let cases = cases.iter().map(|c| check_case(c, spec, fault)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: spec.tolerance,
        eps: spec.eps,
        cases,
    })
}

// ── standard cases ───────────────────────────────────────────────────────────

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_weights(shape, rng)
}

/// Values bounded away from zero so kinks (ReLU, max) are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mag = Uniform::new(0.1, 1.5).unwrap();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let m: f64 = mag.sample(rng);
            if i % 2 == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values spaced at least 0.05 apart, randomly ordered, so max
/// pooling never sees near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One case per differentiable tape op.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let name = |k: OpKind| k.name().to_string();
    let targets = Tensor::from_f64(&[3, 4], &[1., 0., 1., 1., 0., 0., 1., 0., 1., 1., 0., 0.]).unwrap();
    let index = vec![2usize, 0, 2, 1];
    vec![
        Case::new(name(OpKind::Add), vec![normal(r, &[2, 3, 4]), normal(r, &[3, 1])], |t, v| t.add(v[0], v[1])),
        Case::new(name(OpKind::Sub), vec![normal(r, &[2, 3]), normal(r, &[1, 3])], |t, v| t.sub(v[0], v[1])),
        Case::new(name(OpKind::Mul), vec![normal(r, &[2, 3, 4]), normal(r, &[4])], |t, v| t.mul(v[0], v[1])),
        Case::new(name(OpKind::Scale), vec![normal(r, &[5])], |t, v| t.scale(v[0], -0.7)),
        Case::new(name(OpKind::AddScalar), vec![normal(r, &[5])], |t, v| t.add_scalar(v[0], 2.5)),
        Case::new(name(OpKind::Matmul), vec![normal(r, &[2, 3, 4]), normal(r, &[4, 5])], |t, v| t.matmul(v[0], v[1])),
        Case::new(name(OpKind::Softmax), vec![normal(r, &[3, 5])], |t, v| t.softmax(v[0], 1)),
        Case::new(name(OpKind::Sum), vec![normal(r, &[2, 3, 4])], |t, v| t.sum(v[0], 1)),
        Case::new(name(OpKind::Mean), vec![normal(r, &[2, 3, 4])], |t, v| t.mean(v[0], 2)),
        Case::new(name(OpKind::SumAll), vec![normal(r, &[2, 3])], |t, v| t.sum_all(v[0])),
        Case::new(name(OpKind::Permute), vec![normal(r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1])),
        Case::new(name(OpKind::Reshape), vec![normal(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        Case::new(name(OpKind::Slice), vec![normal(r, &[2, 7])], |t, v| t.slice(v[0], 1, 2, 4)),
        Case::new(name(OpKind::Concat), vec![normal(r, &[2, 3]), normal(r, &[2, 2])], |t, v| t.concat(&[v[0], v[1]], 1)),
        Case::new(name(OpKind::BroadcastTo), vec![normal(r, &[3, 1])], |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
        Case::new(name(OpKind::Pad), vec![normal(r, &[2, 3])], |t, v| t.pad(v[0], 1, 2, 1)),
        Case::new(name(OpKind::IndexSelect), vec![normal(r, &[2, 3])], move |t, v| t.index_select(v[0], 1, &index)),
        Case::new(
            name(OpKind::Conv1d),
            vec![normal(r, &[2, 3, 9]), normal(r, &[4, 3, 3]), normal(r, &[4])],
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        Case::new(
            "conv1d_same",
            vec![normal(r, &[1, 2, 6]), normal(r, &[3, 2, 5]), normal(r, &[3])],
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, 2),
        ),
        Case::new(
            name(OpKind::LayerNorm),
            vec![normal(r, &[3, 5]), normal(r, &[5]), normal(r, &[5])],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        Case::new(name(OpKind::MaxPool1d), vec![distinct(r, &[2, 2, 8])], |t, v| t.max_pool1d(v[0], 2, 2)),
        Case::new("max_pool1d_overlap", vec![distinct(r, &[1, 2, 9])], |t, v| t.max_pool1d(v[0], 3, 2)),
        Case::new(name(OpKind::AvgPool1d), vec![normal(r, &[2, 2, 9])], |t, v| t.avg_pool1d(v[0], 4, 2)),
        Case::new(name(OpKind::Relu), vec![away_from_zero(r, &[4, 3])], |t, v| t.relu(v[0])),
        Case::new(name(OpKind::Sigmoid), vec![normal(r, &[4, 3])], |t, v| t.sigmoid(v[0])),
        Case::new(name(OpKind::BceWithLogits), vec![normal(r, &[3, 4])], move |t, v| t.bce_with_logits(v[0], &targets)),
    ]
}

/// A case over `[x, params...]` where `forward` receives the bound params.
fn layer_case(
    name: String,
    x: Tensor<f64>,
    store: &ParamStore<f64>,
    forward: impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var> + 'static,
) -> Case {
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    Case::new(name, inputs, move |t, v| {
        let bound = Bound::from_vars(v[1..].to_vec());
        forward(t, &bound, v[0])
    })
}

/// Perturb every parameter so zero-initialised tables (relative bias) and
/// unit layer-norm gains do not hide gradient bugs.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            let d: f64 = StandardNormal.sample(rng);
            *v += 0.1 * d;
        }
    }
}

/// Attention layers: every variant with every positional encoding, plus the
/// single-head and one-dimension-per-head extremes.
pub fn attention_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut configs: Vec<(String, LgaConfig)> = Vec::new();
    for v in AttentionVariant::ALL {
        for pe in PosEncoding::ALL {
            let cfg = LgaConfig::new(4, 2, 4).with_variant(v).with_pos_encoding(pe);
            configs.push((format!("attention[{}/{}]", v.tag(), pe.tag()), cfg));
        }
    }
    configs.push(("attention[LGA/H=1]".into(), LgaConfig::new(4, 1, 4)));
    configs.push(("attention[LGA/H=D]".into(), LgaConfig::new(4, 4, 4)));
    for (name, cfg) in configs {
        let n = 8;
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", cfg, n)?;
        jitter(&mut store, &mut rng);
        let x = normal(&mut rng, &[1, n, cfg.embed_dim]);
        cases.push(layer_case(name, x, &store, move |t, p, x| Ok(layer.forward(t, p, x)?.output)));
    }
    Ok(cases)
}

/// The miniature end-to-end model settings used for gradient checks.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        leads: 2,
        input_len: 64,
        embed_dim: 8,
        heads: 2,
        stages: 2,
        window_len: 4,
        stride: 2,
        ..ModelConfig::default()
    }
}

/// Front-end block, one transformer block per variant, and the whole
/// miniature model.
pub fn model_cases(seed: u64, model: &ModelConfig) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let spec = ResBlockSpec {
        in_channels: 2,
        out_channels: 3,
        kernel: 7,
        pool: 2,
    };
    let block = ResBlock::new(&mut store, &mut rng, "res", spec)?;
    let x = normal(&mut rng, &[1, 2, 16]);
    cases.push(layer_case("res_block".into(), x, &store, move |t, p, x| block.forward(t, p, x)));

    for v in AttentionVariant::ALL {
        let mut store = ParamStore::new();
        let att = LgaConfig::new(4, 2, 4).with_variant(v);
        let block = TransformerBlock::new(&mut store, &mut rng, "blk", BlockSpec::new(2, att, 2), 8)?;
        jitter(&mut store, &mut rng);
        let x = normal(&mut rng, &[1, 8, 4]);
        cases.push(layer_case(
            format!("transformer_block[{}]", v.tag()),
            x,
            &store,
            move |t, p, x| Ok(block.forward(t, p, x)?.output),
        ));
    }

    let mut store = ParamStore::new();
    let net = Model::build(model, &mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = normal(&mut rng, &[2, model.leads, model.input_len]);
    let name = format!(
        "model[C={},N0={},D={},H={},S={},l={}]",
        model.leads, model.input_len, model.embed_dim, model.heads, model.stages, model.window_len
    );
    cases.push(layer_case(name, x, &store, move |t, p, x| Ok(net.forward(t, p, x)?.logits)).with_max_checked(48));
    Ok(cases)
}

/// Every standard case: ops, attention variants, blocks and the model.
pub fn standard_cases(seed: u64, model: &ModelConfig) -> Result<Vec<Case>> {
    if model.precision != crate::tensor::Precision::F64 && model.embed_dim > 64 {
        return Err(Error::config("gradient checks use a miniature model; embed_dim > 64 is too large"));
    }
    let mut cases = op_cases(seed);
    cases.extend(attention_cases(seed)?);
    cases.extend(model_cases(seed, model)?);
    Ok(cases)
}
