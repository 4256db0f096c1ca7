// SPDX-License-Identifier: Apache-2.0

//! Workload generation: random catalog mixes and GA-evolved mixes that
//! stress fragmentation.
//!
//! Both generators are pure functions of their inputs and seed (ChaCha8).

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{simulate, SimConfig};
use crate::hypervisor::SchedulingMode;
use crate::kernels::{KernelCatalog, KernelId, KernelSpec, KernelTemplate};
use crate::Cycles;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Job {
    pub spec: KernelSpec,
    /// Offset from the start of the run.
    pub arrival: Cycles,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Provenance {
    /// Hand-written or imported.
    Manual,
    Random,
    /// Best individual, found in `generation`, with its fitness.
    Ga {
        generation: u32,
        fitness: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Workload {
    /// Jobs sorted by arrival.
    pub jobs: Vec<Job>,
    pub seed: u64,
    pub provenance: Provenance,
    /// Target grid `(height, width)`.
    pub grid: (usize, usize),
}

impl Workload {
    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    /// Every job fits the target grid.
    pub fn is_admissible(&self) -> bool {
        self.jobs.iter().all(|j| j.spec.height <= self.grid.0 && j.spec.width <= self.grid.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum WorkloadError {
    #[error("catalog has no kind that fits a {0}x{1} grid")]
    NoAdmissibleKind(usize, usize),
    #[error("invalid generator setting: {0}")]
    InvalidConfig(&'static str),
}

/// Bursty arrivals: with probability `burst_probability` the next job
/// follows closely (mean gap `burst_gap`), otherwise after an exponential
/// gap with mean `mean_gap`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ArrivalProcess {
    pub mean_gap: f64,
    pub burst_probability: f64,
    pub burst_gap: f64,
}

impl Default for ArrivalProcess {
    fn default() -> Self {
        Self { mean_gap: 40_000.0, burst_probability: 0.5, burst_gap: 2_000.0 }
    }
}

impl ArrivalProcess {
    fn validate(&self) -> Result<(), WorkloadError> {
        if !(self.mean_gap >= 0.0 && self.burst_gap >= 0.0 && self.mean_gap.is_finite() && self.burst_gap.is_finite()) {
            return Err(WorkloadError::InvalidConfig("arrival gaps must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.burst_probability) {
            return Err(WorkloadError::InvalidConfig("burst_probability must lie in [0, 1]"));
        }
        Ok(())
    }

    fn gap(&self, rng: &mut ChaCha8Rng) -> Cycles {
        let mean = if rng.random::<f64>() < self.burst_probability { self.burst_gap } else { self.mean_gap };
        exponential(rng, mean)
    }
}

fn exponential(rng: &mut ChaCha8Rng, mean: f64) -> Cycles {
    let u: f64 = rng.random();
    libm::floor(-libm::log(1.0 - u) * mean) as Cycles
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct RandomConfig {
    pub n_jobs: usize,
    /// `it_total` is scaled by a uniform factor in `[1 - j, 1 + j]`.
    pub it_jitter: f64,
    pub arrivals: ArrivalProcess,
    pub grid: (usize, usize),
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self { n_jobs: 64, it_jitter: 0.5, arrivals: ArrivalProcess::default(), grid: (4, 4) }
    }
}

fn admissible(catalog: &KernelCatalog, grid: (usize, usize)) -> Result<Vec<&KernelTemplate>, WorkloadError> {
    let kinds: Vec<&KernelTemplate> = catalog.iter().filter(|t| t.height <= grid.0 && t.width <= grid.1).collect();
    if kinds.is_empty() {
        return Err(WorkloadError::NoAdmissibleKind(grid.0, grid.1));
    }
    Ok(kinds)
}

/// `n_jobs` kinds drawn uniformly from the catalog, default arrivals and
/// jitter, 4×4 grid.
pub fn generate_random(catalog: &KernelCatalog, seed: u64, n_jobs: usize) -> Result<Workload, WorkloadError> {
    generate_random_with(catalog, &RandomConfig { n_jobs, ..RandomConfig::default() }, seed)
}

pub fn generate_random_with(catalog: &KernelCatalog, cfg: &RandomConfig, seed: u64) -> Result<Workload, WorkloadError> {
    cfg.arrivals.validate()?;
    if !(0.0..1.0).contains(&cfg.it_jitter) {
        return Err(WorkloadError::InvalidConfig("it_jitter must lie in [0, 1)"));
    }
    let kinds = admissible(catalog, cfg.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t: Cycles = 0;
    let mut jobs = Vec::with_capacity(cfg.n_jobs);
    for i in 0..cfg.n_jobs {
        let template = kinds[rng.random_range(0..kinds.len())];
        let scale = 1.0 + cfg.it_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let mut spec = template.instantiate(KernelId(i as u32));
        spec.it_total = (libm::round(spec.it_total as f64 * scale) as u64).max(1);
        if i > 0 {
            t += cfg.arrivals.gap(&mut rng);
        }
        jobs.push(Job { spec, arrival: t });
    }
    Ok(Workload { jobs, seed, provenance: Provenance::Random, grid: cfg.grid })
}

/// Shapes a GA gene may pick besides the kind's own.
pub const SHAPE_VARIANTS: [(usize, usize); 10] =
    [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2), (1, 4), (4, 1)];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: u32,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub tournament_size: usize,
    pub n_jobs: usize,
    /// Weight of the time-averaged hole count in the fitness.
    pub hole_weight: f64,
    /// Mean arrival gap for the initial population and gap mutations.
    pub mean_gap: f64,
    pub grid: (usize, usize),
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 16,
            generations: 20,
            mutation_rate: 0.05,
            crossover_rate: 0.9,
            tournament_size: 3,
            n_jobs: 64,
            hole_weight: 1.0,
            mean_gap: 10_000.0,
            grid: (4, 4),
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.population_size < 2 || self.tournament_size < 2 {
            return Err(WorkloadError::InvalidConfig("population and tournament sizes must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(WorkloadError::InvalidConfig("rates must lie in [0, 1]"));
        }
        if self.n_jobs == 0 {
            return Err(WorkloadError::InvalidConfig("n_jobs must be >= 1"));
        }
        if !(self.mean_gap >= 0.0 && self.mean_gap.is_finite() && self.hole_weight.is_finite()) {
            return Err(WorkloadError::InvalidConfig("mean_gap and hole_weight must be finite"));
        }
        Ok(())
    }
}

/// One job of a chromosome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gene {
    pub kind: usize,
    /// 0 keeps the kind's shape, `i > 0` picks `SHAPE_VARIANTS[i - 1]`.
    pub shape: usize,
    /// Multiplier on `it_total`, log-uniform in `[0.25, 4]`.
    pub duration: f64,
    pub gap: Cycles,
}

struct GenePool<'a> {
    kinds: Vec<&'a KernelTemplate>,
    shapes: Vec<usize>,
    cfg: &'a GaConfig,
}

impl GenePool<'_> {
    fn sample_kind(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..self.kinds.len())
    }

    fn sample_shape(&self, rng: &mut ChaCha8Rng) -> usize {
        self.shapes[rng.random_range(0..self.shapes.len())]
    }

    fn sample_duration(rng: &mut ChaCha8Rng) -> f64 {
        libm::exp2(rng.random_range(-2.0..=2.0))
    }

    fn random_gene(&self, rng: &mut ChaCha8Rng) -> Gene {
        Gene {
            kind: self.sample_kind(rng),
            shape: self.sample_shape(rng),
            duration: Self::sample_duration(rng),
            gap: exponential(rng, self.cfg.mean_gap),
        }
    }

    fn mutate(&self, g: &mut Gene, rng: &mut ChaCha8Rng) {
        match rng.random_range(0..4) {
            0 => g.kind = self.sample_kind(rng),
            1 => g.shape = self.sample_shape(rng),
            2 => g.duration = Self::sample_duration(rng),
            _ => g.gap = exponential(rng, self.cfg.mean_gap),
        }
    }

    fn express(&self, genes: &[Gene], seed: u64, provenance: Provenance) -> Workload {
        let mut t = 0;
        let jobs = genes
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let mut spec = self.kinds[g.kind].instantiate(KernelId(i as u32));
                if g.shape > 0 {
                    (spec.height, spec.width) = SHAPE_VARIANTS[g.shape - 1];
                }
                spec.it_total = (libm::round(spec.it_total as f64 * g.duration) as u64).max(1);
                if i > 0 {
                    t += g.gap;
                }
                Job { spec, arrival: t }
            })
            .collect();
        Workload { jobs, seed, provenance, grid: self.cfg.grid }
    }
}

/// Fragmentation pressure of a workload: fragmentation-blocked scheduling
/// attempts under plain tiling, plus `hole_weight` times the time-averaged
/// number of holes.
pub fn fragmentation_fitness(workload: &Workload, hole_weight: f64) -> f64 {
    let config = SimConfig {
        grid_height: workload.grid.0,
        grid_width: workload.grid.1,
        record_trace: false,
        scheduler: crate::hypervisor::SchedulerConfig::with_mode(SchedulingMode::Tiled),
        ..SimConfig::default()
    };
    let Ok(out) = simulate(config, workload) else { return 0.0 };
    let first = workload.jobs.iter().map(|j| j.arrival).min().unwrap_or(0);
    let span = out.end_time.saturating_sub(first).max(1);
    out.stats.fragmentation_events as f64 + hole_weight * out.stats.hole_cycles as f64 / span as f64
}

/// Per-generation record of a GA run.
#[derive(Debug, Clone, PartialEq)]
pub struct GaHistory {
    /// Best fitness seen so far, after each generation (index 0 is the
    /// initial population).
    pub best: Vec<f64>,
    /// Fitness of every member of the initial population.
    pub initial: Vec<f64>,
}

/// GA with serial fitness evaluation.
pub fn ga_evolve(catalog: &KernelCatalog, ga: &GaConfig, seed: u64) -> Result<Workload, WorkloadError> {
    ga_evolve_with(catalog, ga, seed, |ws| ws.iter().map(|w| fragmentation_fitness(w, ga.hole_weight)).collect())
        .map(|(w, _)| w)
}

/// GA with a caller-supplied batch evaluator (one fitness per workload, in
/// order), so evaluation can be parallelized outside this crate.
///
/// Tournament selection, one-point crossover, per-gene mutation and
/// elitism of one. Ties keep the earlier individual.
pub fn ga_evolve_with<F>(
    catalog: &KernelCatalog,
    ga: &GaConfig,
    seed: u64,
    mut evaluate: F,
) -> Result<(Workload, GaHistory), WorkloadError>
where
    F: FnMut(&[Workload]) -> Vec<f64>,
{
    ga.validate()?;
    let kinds = admissible(catalog, ga.grid)?;
    let mut shapes: Vec<usize> = alloc::vec![0];
    shapes.extend((1..=SHAPE_VARIANTS.len()).filter(|&i| {
        let (h, w) = SHAPE_VARIANTS[i - 1];
        h <= ga.grid.0 && w <= ga.grid.1
    }));
    let pool = GenePool { kinds, shapes, cfg: ga };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut population: Vec<Vec<Gene>> =
        (0..ga.population_size).map(|_| (0..ga.n_jobs).map(|_| pool.random_gene(&mut rng)).collect()).collect();
    let score = |pop: &[Vec<Gene>], evaluate: &mut F| {
        let ws: Vec<Workload> = pop.iter().map(|g| pool.express(g, seed, Provenance::Random)).collect();
        evaluate(&ws)
    };
    let mut fitness = score(&population, &mut evaluate);
    let argmax = |f: &[f64]| (0..f.len()).fold(0, |best, i| if f[i] > f[best] { i } else { best });

    let initial = fitness.clone();
    let mut best_idx = argmax(&fitness);
    let mut best = (population[best_idx].clone(), fitness[best_idx], 0u32);
    let mut history = alloc::vec![best.1];

    for generation in 1..=ga.generations {
        let tournament = |rng: &mut ChaCha8Rng, fitness: &[f64]| {
            let mut pick = rng.random_range(0..fitness.len());
            for _ in 1..ga.tournament_size {
                let c = rng.random_range(0..fitness.len());
                if fitness[c] > fitness[pick] {
                    pick = c;
                }
            }
            pick
        };
        let mut next = Vec::with_capacity(ga.population_size);
        next.push(population[best_idx].clone());
        while next.len() < ga.population_size {
            let a = tournament(&mut rng, &fitness);
            let b = tournament(&mut rng, &fitness);
            let mut child = population[a].clone();
            if rng.random::<f64>() < ga.crossover_rate && ga.n_jobs > 1 {
                let cut = rng.random_range(1..ga.n_jobs);
                child[cut..].copy_from_slice(&population[b][cut..]);
            }
            for g in &mut child {
                if rng.random::<f64>() < ga.mutation_rate {
                    pool.mutate(g, &mut rng);
                }
            }
            next.push(child);
        }
        population = next;
        fitness = score(&population, &mut evaluate);
        best_idx = argmax(&fitness);
        if fitness[best_idx] > best.1 {
            best = (population[best_idx].clone(), fitness[best_idx], generation);
        }
        history.push(best.1);
    }

    let workload = pool.express(&best.0, seed, Provenance::Ga { generation: best.2, fitness: best.1 });
    Ok((workload, GaHistory { best: history, initial }))
}
