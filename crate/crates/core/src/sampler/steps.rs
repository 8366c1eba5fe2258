//! Update steps and the registry that resolves them by name.
//!
//! One sampler iteration runs the configured schedule of steps in order.
//! The default schedule draws the effects blocks, the three families of
//! variance components and then sweeps the voxels with Metropolis-Hastings
//! updates of `psi` and `v_p`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::hierarchy::{ln_vp_prior, psi_mean_unchecked, N_KINETIC};
use crate::sampler::chain::{ChainContext, Family, Tally};
use crate::sampler::conditionals::{
    effects_conditional, noise_variance_conditional, patient_variance_conditional,
    voxel_variance_conditional, BlockIndex,
};

pub const DEFAULT_SCHEDULE: [&str; 6] = [
    "effects",
    "patient-variances",
    "voxel-variances",
    "noise-variances",
    "voxel-psi",
    "voxel-vp",
];

const PSI_STREAM: u64 = 1;
const VP_STREAM: u64 = 2;

pub trait UpdateStep: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()>;
}

pub type StepFactory = fn() -> Box<dyn UpdateStep>;

/// Named constructors for update steps.
#[derive(Clone)]
pub struct StepRegistry {
    factories: BTreeMap<String, StepFactory>,
}

impl fmt::Debug for StepRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl StepRegistry {
    pub fn empty() -> Self {
        StepRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("effects", || Box::new(EffectsBlock));
        r.register("patient-variances", || Box::new(PatientVariances));
        r.register("voxel-variances", || Box::new(VoxelVariances));
        r.register("noise-variances", || Box::new(NoiseVariances));
        r.register("voxel-psi", || Box::new(VoxelPsi));
        r.register("voxel-vp", || Box::new(VascularFraction));
        r
    }

    /// Adds or replaces a step.
    pub fn register(&mut self, name: &str, factory: StepFactory) {
        self.factories.insert(name.to_owned(), factory);
    }

    pub fn build(&self, name: &str) -> Result<Box<dyn UpdateStep>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStep(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for StepRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Multiplicative proposal tuning: grow by 10% when the batch rate is above
/// the central half of `band`, shrink by 10% when below it. Aiming at the
/// central half keeps the frozen rate clear of the band edges once the
/// chain has settled.
pub fn adapt_proposals(sd: f64, batch: Tally, band: (f64, f64)) -> f64 {
    let margin = 0.25 * (band.1 - band.0);
    match batch.rate() {
        Some(rate) if rate > band.1 - margin => sd * 1.1,
        Some(rate) if rate < band.0 + margin => sd * 0.9,
        _ => sd,
    }
}

/// Draws the fixed and patient effects of kinetic parameter `l` jointly.
pub fn gibbs_effects_block(ctx: &mut ChainContext<'_>, l: usize) -> Result<()> {
    let block = effects_conditional(&ctx.state, ctx.layout(), l)?;
    let x = block.sample(ctx.rng());
    let idx = BlockIndex {
        n_patients: ctx.layout().n_patients(),
    };
    let s = &mut ctx.state;
    s.fixed.alpha[l] = x[BlockIndex::ALPHA];
    s.fixed.beta[l] = x[BlockIndex::BETA];
    for j in 0..idx.n_patients {
        s.patient.gamma[j][l] = x[idx.gamma(j)];
        s.patient.delta[j][l] = x[idx.delta(j)];
    }
    Ok(())
}

pub fn gibbs_patient_variances(ctx: &mut ChainContext<'_>) {
    for j in 0..ctx.layout().n_patients() {
        for l in 0..N_KINETIC {
            let g = patient_variance_conditional(ctx.state.patient.gamma[j][l]);
            let d = patient_variance_conditional(ctx.state.patient.delta[j][l]);
            ctx.state.hypers.tau2_gamma[j][l] = g.sample(ctx.rng());
            ctx.state.hypers.tau2_delta[j][l] = d.sample(ctx.rng());
        }
    }
}

pub fn gibbs_voxel_variances(ctx: &mut ChainContext<'_>) {
    let layout = ctx.layout();
    for g in 0..layout.n_groups() {
        let (i, j) = layout.scan_patient(g);
        let mean = psi_mean_unchecked(i, j, &ctx.state);
        for l in 0..N_KINETIC {
            let ig = voxel_variance_conditional(&ctx.state.voxel.psi[g], mean, l);
            ctx.state.hypers.tau2_eps[g][l] = ig.sample(ctx.rng());
        }
    }
}

pub fn gibbs_noise_variances(ctx: &mut ChainContext<'_>) {
    for g in 0..ctx.layout().n_groups() {
        let series = ctx.data().group(g);
        let n_obs = series.voxels.len() * series.grid.len();
        let ig = noise_variance_conditional(n_obs, ctx.group_sse(g));
        ctx.state.nuisance.sigma2[g] = ig.sample(ctx.rng());
    }
}

fn psi_log_prior(psi: [f64; 2], mean: [f64; 2], tau2: [f64; 2]) -> f64 {
    (0..N_KINETIC)
        .map(|l| -(psi[l] - mean[l]).powi(2) / (2.0 * tau2[l]))
        .sum()
}

/// Log Metropolis-Hastings ratio for moving voxel `(group, voxel)` to
/// `proposal`. Leaves the unit convolution at `proposal` in `ctx.scratch`
/// and returns its residual sum of squares alongside.
fn psi_ratio_and_fill(ctx: &mut ChainContext<'_>, group: usize, voxel: usize, proposal: [f64; 2]) -> (f64, f64) {
    let (i, j) = ctx.layout().scan_patient(group);
    let mean = psi_mean_unchecked(i, j, &ctx.state);
    let tau2 = ctx.state.hypers.tau2_eps[group];
    let sigma2 = ctx.state.nuisance.sigma2[group];
    let vp = ctx.state.nuisance.vp[group][voxel];
    let current = ctx.state.voxel.psi[group][voxel];

    let t = ctx.basis(group).len();
    let mut scratch = std::mem::take(&mut ctx.scratch);
    ctx.basis(group).unit_convolution(proposal[1].exp(), &mut scratch[..t]);
    let sse_new = ctx.voxel_sse(group, voxel, proposal[0].exp(), vp, &scratch[..t]);
    ctx.scratch = scratch;

    let ratio = psi_log_prior(proposal, mean, tau2) - psi_log_prior(current, mean, tau2)
        - (sse_new - ctx.sse(group, voxel)) / (2.0 * sigma2);
    (ratio, sse_new)
}

/// Log acceptance ratio of a `psi` move, without changing the state.
pub fn psi_log_acceptance_ratio(ctx: &mut ChainContext<'_>, group: usize, voxel: usize, proposal: [f64; 2]) -> f64 {
    psi_ratio_and_fill(ctx, group, voxel, proposal).0
}

/// Joint random-walk update of `(ln K^trans, ln k_ep)` for one voxel. The
/// target is the Gaussian voxel-effect prior centred at the effect-only
/// mean times the voxel's data likelihood.
pub fn mh_voxel_psi<R: Rng>(
    ctx: &mut ChainContext<'_>,
    group: usize,
    voxel: usize,
    proposal_sd: f64,
    rng: &mut R,
) -> bool {
    let current = ctx.state.voxel.psi[group][voxel];
    let proposal = [
        current[0] + proposal_sd * rng.sample::<f64, _>(StandardNormal),
        current[1] + proposal_sd * rng.sample::<f64, _>(StandardNormal),
    ];
    let (ratio, sse_new) = psi_ratio_and_fill(ctx, group, voxel, proposal);
    let accept = ratio >= 0.0 || rng.random::<f64>().ln() < ratio;
    if accept {
        let t = ctx.basis(group).len();
        ctx.conv[group][voxel].copy_from_slice(&ctx.scratch[..t]);
        ctx.sse[group][voxel] = sse_new;
        ctx.state.voxel.psi[group][voxel] = proposal;
    }
    ctx.record(Family::Psi, accept);
    accept
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Log target of `logit(v_p)` up to the data term: the Beta prior plus the
/// Jacobian `v_p (1 - v_p)`.
#[inline]
fn vp_log_prior_logit(vp: f64) -> f64 {
    if !(vp > 0.0 && vp < 1.0) {
        return f64::NEG_INFINITY;
    }
    ln_vp_prior(vp) + vp.ln() + (1.0 - vp).ln()
}

fn vp_ratio(ctx: &ChainContext<'_>, group: usize, voxel: usize, proposal: f64) -> (f64, f64) {
    let psi = ctx.state.voxel.psi[group][voxel];
    let sigma2 = ctx.state.nuisance.sigma2[group];
    let current = ctx.state.nuisance.vp[group][voxel];
    let lp = vp_log_prior_logit(proposal);
    if lp == f64::NEG_INFINITY {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let sse_new = ctx.voxel_sse(group, voxel, psi[0].exp(), proposal, &ctx.conv[group][voxel]);
    let ratio = lp - vp_log_prior_logit(current) - (sse_new - ctx.sse(group, voxel)) / (2.0 * sigma2);
    (ratio, sse_new)
}

/// Log acceptance ratio of moving `v_p` of one voxel to `proposal`.
pub fn vp_log_acceptance_ratio(ctx: &ChainContext<'_>, group: usize, voxel: usize, proposal: f64) -> f64 {
    vp_ratio(ctx, group, voxel, proposal).0
}

/// Random walk on `logit(v_p)` targeting Beta(1, 19) times the voxel's
/// data likelihood.
pub fn mh_vp<R: Rng>(
    ctx: &mut ChainContext<'_>,
    group: usize,
    voxel: usize,
    proposal_sd: f64,
    rng: &mut R,
) -> bool {
    let current = ctx.state.nuisance.vp[group][voxel];
    let proposal = sigmoid(logit(current) + proposal_sd * rng.sample::<f64, _>(StandardNormal));
    let (ratio, sse_new) = vp_ratio(ctx, group, voxel, proposal);
    let accept = ratio >= 0.0 || rng.random::<f64>().ln() < ratio;
    if accept {
        ctx.state.nuisance.vp[group][voxel] = proposal;
        ctx.sse[group][voxel] = sse_new;
    }
    ctx.record(Family::Vp, accept);
    accept
}

#[derive(Debug, Clone, Copy)]
pub struct EffectsBlock;

impl UpdateStep for EffectsBlock {
    fn name(&self) -> &'static str {
        "effects"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        for l in 0..N_KINETIC {
            gibbs_effects_block(ctx, l)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatientVariances;

impl UpdateStep for PatientVariances {
    fn name(&self) -> &'static str {
        "patient-variances"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        gibbs_patient_variances(ctx);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VoxelVariances;

impl UpdateStep for VoxelVariances {
    fn name(&self) -> &'static str {
        "voxel-variances"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        gibbs_voxel_variances(ctx);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseVariances;

impl UpdateStep for NoiseVariances {
    fn name(&self) -> &'static str {
        "noise-variances"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        gibbs_noise_variances(ctx);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VoxelPsi;

impl UpdateStep for VoxelPsi {
    fn name(&self) -> &'static str {
        "voxel-psi"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        let sd = ctx.proposals.psi;
        for g in 0..ctx.layout().n_groups() {
            for k in 0..ctx.state.voxel.psi[g].len() {
                let mut rng = ctx.voxel_rng(PSI_STREAM, g, k);
                mh_voxel_psi(ctx, g, k, sd, &mut rng);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VascularFraction;

impl UpdateStep for VascularFraction {
    fn name(&self) -> &'static str {
        "voxel-vp"
    }

    fn update(&self, ctx: &mut ChainContext<'_>) -> Result<()> {
        let sd = ctx.proposals.vp;
        for g in 0..ctx.layout().n_groups() {
            for k in 0..ctx.state.nuisance.vp[g].len() {
                let mut rng = ctx.voxel_rng(VP_STREAM, g, k);
                mh_vp(ctx, g, k, sd, &mut rng);
            }
        }
        Ok(())
    }
}
