//! Finite-difference checks of the loss, attention, fusion, head activation,
//! every block type and the full network.

use rand::seq::index::sample;
use rand::Rng;

use crate::attention::{self_fusion, heads_for, AttentionMode, FracTalAttention, Fusion};
use crate::blocks::{PspPooling, Unit, UnitConfig, UnitVariant};
use crate::error::Result;
use crate::ftnmt::ftnmt_loss;
use crate::mantis::{crisp_sigmoid, Mantis, MantisConfig};
use crate::pipeline::{synth_dataset, Batch};
use crate::substrate::autograd::Var;
use crate::substrate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::substrate::param::{init_rng, ParamBuilder, ParamId, ParamStore};
use crate::substrate::tensor::Tensor;
use crate::trainer::loss::mantis_loss;

pub const LAYER_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub include_network: bool,
    /// Parameters of the full network sampled for checking (one coordinate each).
    pub network_params: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            include_network: true,
            network_params: 48,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn layer_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        tol: LAYER_TOL,
        // exactly-zero gradients are compared to within 1e-8 absolute
        abs_floor: 1e-4,
        max_coords_per_param: Some(12),
        seed,
        ..Default::default()
    }
}

/// Moves zero-initialised mixing scales away from zero so the attention
/// branches contribute to the gradient.
fn excite_gammas(store: &mut ParamStore, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        let leaf = p.name.rsplit('.').next().unwrap_or(&p.name);
        if leaf.starts_with("gamma") && leaf != "gamma_sigmoid" {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.3..0.8));
        }
    }
}

/// `Σ w ⊙ y` with a fixed random `w`, turning any output into a scalar.
fn probe(y: &Var, seed: u64) -> Result<Var> {
    let w = Tensor::rand_uniform(y.shape(), -1.0, 1.0, &mut init_rng(seed ^ 0x5eed));
    Ok(y.mul(&Var::constant(w))?.sum_all())
}

fn unit_input(pb: &mut ParamBuilder, shape: &[usize]) -> ParamId {
    let t = Tensor::rand_uniform(shape, -1.0, 1.0, pb.rng());
    pb.add("x", t)
}

fn check_ftnmt(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let p = pb.add("p", Tensor::rand_uniform(&[2, 3, 4, 4], 0.05, 0.95, &mut init_rng(seed + 1)));
    let l = pb.add("l", Tensor::rand_uniform(&[2, 3, 4, 4], 0.05, 0.95, &mut init_rng(seed + 2)));
    finite_diff_check(
        &mut store,
        |s| ftnmt_loss(&Var::param(s, p), &Var::param(s, l), 5),
        &layer_cfg(seed),
    )
}

fn check_attention(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let att = FracTalAttention::new(&mut pb.child("att"), 8, 2, 5);
    let q = unit_input(&mut pb.child("q"), &[1, 8, 6, 6]);
    let k = unit_input(&mut pb.child("k"), &[1, 8, 6, 6]);
    let v = unit_input(&mut pb.child("v"), &[1, 8, 6, 6]);
    finite_diff_check(
        &mut store,
        |s| probe(&att.forward(s, &Var::param(s, q), &Var::param(s, k), &Var::param(s, v))?, seed),
        &layer_cfg(seed),
    )
}

fn check_self_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let l = unit_input(&mut pb.child("l"), &[2, 4, 5, 5]);
    let a = pb.add("a", Tensor::rand_uniform(&[2, 4, 5, 5], 0.0, 1.0, &mut init_rng(seed + 3)));
    let g = pb.add("gamma", Tensor::scalar(0.7));
    finite_diff_check(
        &mut store,
        |s| probe(&self_fusion(&Var::param(s, l), &Var::param(s, a), &Var::param(s, g))?, seed),
        &layer_cfg(seed),
    )
}

fn check_relative_fusion(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let fusion = Fusion::new(&mut pb.child("fusion"), 8, heads_for(8), 5);
    let a = unit_input(&mut pb.child("a"), &[1, 8, 6, 6]);
    let b = unit_input(&mut pb.child("b"), &[1, 8, 6, 6]);
    excite_gammas(&mut store, &mut init_rng(seed + 4));
    finite_diff_check(
        &mut store,
        |s| probe(&fusion.forward(s, &Var::param(s, a), &Var::param(s, b), AttentionMode::Enabled)?, seed),
        &layer_cfg(seed),
    )
}

fn check_crisp_sigmoid(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let x = unit_input(&mut pb.child("x"), &[1, 1, 5, 5]);
    let g = pb.add_bounded("gamma_sigmoid", Tensor::scalar(0.6), 1e-2, 1.0);
    finite_diff_check(
        &mut store,
        |s| probe(&crisp_sigmoid(&Var::param(s, x), &Var::param(s, g))?, seed),
        &layer_cfg(seed),
    )
}

fn check_unit(variant: UnitVariant, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let unit = Unit::new(&mut pb.child("unit"), UnitConfig::new(8, 3, variant));
    let x = unit_input(&mut pb.child("in"), &[1, 8, 8, 8]);
    excite_gammas(&mut store, &mut init_rng(seed + 5));
    finite_diff_check(
        &mut store,
        |s| probe(&unit.forward(s, &Var::param(s, x), AttentionMode::Enabled)?, seed),
        &GradCheckConfig {
            max_coords_per_param: Some(4),
            ..layer_cfg(seed)
        },
    )
}

fn check_psp(seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let psp = PspPooling::new(&mut pb.child("psp"), 8);
    let x = unit_input(&mut pb.child("in"), &[1, 8, 8, 8]);
    finite_diff_check(
        &mut store,
        |s| probe(&psp.forward(s, &Var::param(s, x))?, seed),
        &layer_cfg(seed),
    )
}

/// Maps images into `(0, 1)` with a small dither. Clamped synthetic pixels are
/// exactly tied, which puts pooling and ReLU on their kinks where central
/// differences and the analytic subgradient legitimately disagree.
fn dither(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    let mut out = t.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.01 + 0.98 * *v + rng.gen_range(-5e-3..5e-3));
    out
}

/// Multitask loss of a D4nf8 network on one dithered synthetic 64×64 chip,
/// checked on one coordinate of each of `n_params` sampled parameters plus
/// every scale.
pub fn check_network(variant: UnitVariant, n_params: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = Mantis::new(MantisConfig {
        seed,
        ..MantisConfig::new(4, 8, variant)
    })?;
    let mut rng = init_rng(seed + 6);
    excite_gammas(&mut model.params, &mut rng);
    let gs = model.gamma_sigmoid();
    model.params.get_mut(gs).value = Tensor::scalar(0.6);

    let chip = synth_dataset(1, 64, seed)?.remove(0);
    let batch = Batch::from_chips(&[&chip])?;
    let img1 = Var::constant(dither(&batch.img1, &mut rng));
    let img2 = Var::constant(dither(&batch.img2, &mut rng));

    let ids: Vec<ParamId> = model.params.ids().collect();
    let mut only: Vec<ParamId> = sample(&mut rng, ids.len(), n_params.min(ids.len()))
        .into_iter()
        .map(|i| ids[i])
        .collect();
    only.extend(model.attention_gammas());
    only.push(gs);
    only.sort();
    only.dedup();

    let mut store = model.params.clone();
    finite_diff_check(
        &mut store,
        |s| {
            let out = model.forward_with(s, &img1, &img2, AttentionMode::Enabled)?;
            mantis_loss(&out, &batch, 5)
        },
        &GradCheckConfig {
            // nearly flat synthetic regions leave pre-activations close to ReLU
            // kinks, which a 1e-5 step can cross
            eps: 1e-6,
            tol: NETWORK_TOL,
            max_coords_per_param: Some(1),
            only: Some(only),
            seed,
            ..Default::default()
        },
    )
}

/// Runs every check and returns one result per case.
pub fn run_gradient_suite(opts: &SuiteOptions) -> Result<Vec<SuiteResult>> {
    let s = opts.seed;
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteResult {
            name: name.to_string(),
            report,
        })
    };
    push("ftnmt_loss", check_ftnmt(s)?);
    push("fractal_attention", check_attention(s)?);
    push("self_fusion", check_self_fusion(s)?);
    push("relative_fusion", check_relative_fusion(s)?);
    push("crisp_sigmoid", check_crisp_sigmoid(s)?);
    push("unit_fractal_resnet", check_unit(UnitVariant::FractalResnet, s)?);
    push("unit_ceecnet_v1", check_unit(UnitVariant::CeecnetV1, s)?);
    push("unit_ceecnet_v2", check_unit(UnitVariant::CeecnetV2, s)?);
    push("psp_pooling", check_psp(s)?);
    if opts.include_network {
        push(
            "mantis_d4nf8",
            check_network(UnitVariant::FractalResnet, opts.network_params, s)?,
        );
    }
    Ok(out)
}
