use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ModelState, StudyLayout};
use crate::kinetics::AifBasis;
use crate::sampler::steps::{adapt_proposals, StepRegistry, DEFAULT_SCHEDULE};
use crate::studyio::StudyData;

/// Random-walk proposal standard deviations, one per Metropolis-Hastings
/// family. `psi` acts on both log-rates of a voxel, `vp` on `logit(v_p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    pub psi: f64,
    pub vp: f64,
}

impl Default for ProposalScales {
    fn default() -> Self {
        ProposalScales { psi: 0.1, vp: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Psi,
    Vp,
}

impl Family {
    fn slot(self) -> usize {
        match self {
            Family::Psi => 0,
            Family::Vp => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub accepted: u64,
    pub proposed: u64,
}

impl Tally {
    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }

    fn add(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub burn_in: u64,
    pub iterations: u64,
    pub thin: u64,
    pub seed: u64,
    pub target_accept: (f64, f64),
    pub adapt_interval: u64,
    pub initial_proposal_sd: ProposalScales,
    /// Update steps run in order once per iteration, by registry name.
    pub schedule: Vec<String>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 10_000,
            iterations: 100_000,
            thin: 100,
            seed: 0,
            target_accept: (0.30, 0.50),
            adapt_interval: 100,
            initial_proposal_sd: ProposalScales::default(),
            schedule: DEFAULT_SCHEDULE.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.thin < 1 || self.iterations < self.thin {
            return bad(format!(
                "need iterations >= thin >= 1, got iterations {} thin {}",
                self.iterations, self.thin
            ));
        }
        let (lo, hi) = self.target_accept;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("target acceptance band ({lo}, {hi}) must lie inside (0, 1)"));
        }
        if self.adapt_interval < 1 {
            return bad("adapt_interval must be at least 1".into());
        }
        let sd = self.initial_proposal_sd;
        if !(sd.psi > 0.0 && sd.vp > 0.0 && sd.psi.is_finite() && sd.vp.is_finite()) {
            return bad("initial proposal sds must be positive".into());
        }
        if self.schedule.is_empty() {
            return bad("update schedule is empty".into());
        }
        Ok(())
    }

    pub fn retained_draws(&self) -> u64 {
        self.iterations / self.thin
    }
}

/// Realised post-burn-in acceptance and the frozen proposal scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub psi: Option<f64>,
    pub vp: Option<f64>,
    pub psi_tally: Tally,
    pub vp_tally: Tally,
    pub proposal_sd: ProposalScales,
}

/// Thinned post-burn-in draws with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSamples {
    pub layout: StudyLayout,
    pub config: McmcConfig,
    pub acceptance: AcceptanceReport,
    pub draws: Vec<ModelState>,
}

impl ChainSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }
}

const WORDS_PER_ITERATION_SHIFT: u32 = 20;

/// Mutable sampler state: the current parameters plus per-voxel caches of
/// the unit convolution and residual sum of squares under those parameters.
pub struct ChainContext<'a> {
    data: &'a StudyData,
    bases: Vec<AifBasis>,
    pub state: ModelState,
    pub(crate) conv: Vec<Vec<Vec<f64>>>,
    pub(crate) sse: Vec<Vec<f64>>,
    pub(crate) scratch: Vec<f64>,
    pub proposals: ProposalScales,
    batch: [Tally; 2],
    totals: [Tally; 2],
    counting: bool,
    iteration: u64,
    rng: ChaCha8Rng,
    stream_key: [u8; 32],
}

impl<'a> ChainContext<'a> {
    pub fn new(data: &'a StudyData, init: ModelState, proposals: ProposalScales, seed: u64) -> Result<Self> {
        let layout = data.layout();
        init.validate(layout)?;
        if let Some(v) = init.nuisance.vp.iter().flatten().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "initial vascular fractions must lie strictly inside (0, 1), got {v}"
            )));
        }
        let bases = data.bases();
        let max_t = bases.iter().map(AifBasis::len).max().unwrap_or(0);
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let stream_key = rng.get_seed();
        let mut ctx = ChainContext {
            data,
            bases,
            conv: Vec::with_capacity(layout.n_groups()),
            sse: Vec::with_capacity(layout.n_groups()),
            scratch: vec![0.0; max_t],
            state: init,
            proposals,
            batch: [Tally::default(); 2],
            totals: [Tally::default(); 2],
            counting: false,
            iteration: 0,
            rng,
            stream_key,
        };
        for g in 0..layout.n_groups() {
            let t = ctx.bases[g].len();
            let n = ctx.state.voxel.psi[g].len();
            ctx.conv.push(vec![vec![0.0; t]; n]);
            ctx.sse.push(vec![0.0; n]);
            for k in 0..n {
                ctx.refresh_voxel(g, k);
            }
        }
        if ctx.sse.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite likelihood at the initial state".into()));
        }
        Ok(ctx)
    }

    pub fn data(&self) -> &'a StudyData {
        self.data
    }

    pub fn layout(&self) -> &'a StudyLayout {
        self.data.layout()
    }

    pub fn basis(&self, group: usize) -> &AifBasis {
        &self.bases[group]
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Independent stream for one voxel-level update at the current
    /// iteration, so sweeps over voxels can run in any order.
    pub(crate) fn voxel_rng(&self, tag: u64, group: usize, voxel: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.stream_key);
        r.set_stream((tag << 56) | ((group as u64) << 32) | voxel as u64);
        r.set_word_pos(u128::from(self.iteration) << WORDS_PER_ITERATION_SHIFT);
        r
    }

    /// Residual sum of squares of one voxel for the given parameters, with
    /// the unit convolution written to `conv`.
    pub(crate) fn voxel_sse(&self, group: usize, voxel: usize, ktrans: f64, vp: f64, conv: &[f64]) -> f64 {
        let y = &self.data.group(group).voxels[voxel].values;
        let cp = self.bases[group].plasma();
        let mut acc = 0.0;
        for t in 0..y.len() {
            let r = y[t] - vp * cp[t] - ktrans * conv[t];
            acc += r * r;
        }
        acc
    }

    pub(crate) fn refresh_voxel(&mut self, group: usize, voxel: usize) {
        let psi = self.state.voxel.psi[group][voxel];
        let vp = self.state.nuisance.vp[group][voxel];
        let mut conv = std::mem::take(&mut self.conv[group][voxel]);
        self.bases[group].unit_convolution(psi[1].exp(), &mut conv);
        self.sse[group][voxel] = self.voxel_sse(group, voxel, psi[0].exp(), vp, &conv);
        self.conv[group][voxel] = conv;
    }

    /// Cached residual sum of squares of a voxel.
    pub fn sse(&self, group: usize, voxel: usize) -> f64 {
        self.sse[group][voxel]
    }

    pub fn group_sse(&self, group: usize) -> f64 {
        self.sse[group].iter().sum()
    }

    pub(crate) fn record(&mut self, family: Family, accepted: bool) {
        self.batch[family.slot()].add(accepted);
        if self.counting {
            self.totals[family.slot()].add(accepted);
        }
    }

    pub fn batch_tally(&self, family: Family) -> Tally {
        self.batch[family.slot()]
    }

    pub fn total_tally(&self, family: Family) -> Tally {
        self.totals[family.slot()]
    }

    fn adapt(&mut self, band: (f64, f64)) {
        self.proposals.psi = adapt_proposals(self.proposals.psi, self.batch[0], band);
        self.proposals.vp = adapt_proposals(self.proposals.vp, self.batch[1], band);
        self.batch = [Tally::default(); 2];
    }
}

/// Runs the sampler with the built-in update steps.
pub fn run_chain(config: &McmcConfig, data: &StudyData, init: ModelState) -> Result<ChainSamples> {
    run_chain_with(&StepRegistry::builtin(), config, data, init)
}

/// Runs `config.schedule` resolved against `registry`. Proposal scales
/// adapt every `adapt_interval` burn-in iterations and are frozen
/// afterwards; every `thin`-th post-burn-in state is kept.
pub fn run_chain_with(
    registry: &StepRegistry,
    config: &McmcConfig,
    data: &StudyData,
    init: ModelState,
) -> Result<ChainSamples> {
    config.validate()?;
    let steps = config
        .schedule
        .iter()
        .map(|name| registry.build(name))
        .collect::<Result<Vec<_>>>()?;
    let mut ctx = ChainContext::new(data, init, config.initial_proposal_sd, config.seed)?;
    let total = config.burn_in + config.iterations;
    let mut draws = Vec::with_capacity(config.retained_draws() as usize);

    for it in 0..total {
        ctx.iteration = it;
        ctx.counting = it >= config.burn_in;
        for step in &steps {
            step.update(&mut ctx)?;
        }
        if it < config.burn_in {
            if (it + 1).is_multiple_of(config.adapt_interval) {
                ctx.adapt(config.target_accept);
            }
        } else if (it - config.burn_in + 1).is_multiple_of(config.thin) {
            draws.push(ctx.state.clone());
        }
    }

    let psi_tally = ctx.total_tally(Family::Psi);
    let vp_tally = ctx.total_tally(Family::Vp);
    Ok(ChainSamples {
        layout: data.layout().clone(),
        config: config.clone(),
        acceptance: AcceptanceReport {
            psi: psi_tally.rate(),
            vp: vp_tally.rate(),
            psi_tally,
            vp_tally,
            proposal_sd: ctx.proposals,
        },
        draws,
    })
}
