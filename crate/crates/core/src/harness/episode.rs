use rand::seq::SliceRandom;
use rand::Rng;

use crate::attacks::{
    boundary_attack, hybrid_surrogate_attack, nes_attack, AttackTrace, Blinding, BoundaryParams,
    NesParams, Oracle, SurrogateParams,
};
use crate::detector::{process_query, AccountState, Decision, DetectorConfig};
use crate::encoder::Encoding;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, QueryMode, QueryRequest, QueryResponse};
use crate::models::{Dataset, Image};
use crate::numerics::NetModel;
use crate::rng::RootSeed;

/// Attacker-side oracle over the gateway: when an account is banned it
/// re-registers and resends, so the attack sees an uninterrupted query
/// stream and pays in accounts. Records the stream for baseline replays.
pub struct ReRegisteringOracle<'a> {
    gateway: &'a mut Gateway,
    account: u64,
    accounts_used: u64,
    queries: u64,
    initial_detections: u64,
    record: Vec<Vec<f64>>,
}

impl<'a> ReRegisteringOracle<'a> {
    pub fn new(gateway: &'a mut Gateway) -> Self {
        let initial_detections = gateway.detection_count();
        let account = gateway.create_account();
        Self {
            gateway,
            account,
            accounts_used: 1,
            queries: 0,
            initial_detections,
            record: Vec::new(),
        }
    }

    pub fn accounts_used(&self) -> u64 {
        self.accounts_used
    }

    pub fn recorded_stream(&self) -> &[Vec<f64>] {
        &self.record
    }

    fn send(&mut self, image: &Image, mode: QueryMode) -> Result<QueryResponse> {
        loop {
            let response = self.gateway.handle_query(&QueryRequest {
                account_id: self.account,
                pixels: image.pixels().to_vec(),
                mode,
            })?;
            if response == QueryResponse::Banned {
                self.account = self.gateway.create_account();
                self.accounts_used += 1;
                continue;
            }
            self.queries += 1;
            self.record.push(image.pixels().to_vec());
            return Ok(response);
        }
    }
}

impl Oracle for ReRegisteringOracle<'_> {
    fn hard(&mut self, image: &Image) -> Result<usize> {
        match self.send(image, QueryMode::Hard)? {
            QueryResponse::Ok { label } => Ok(label),
            other => Err(Error::InvalidInput(format!("unexpected response {other:?}"))),
        }
    }

    fn soft(&mut self, image: &Image) -> Result<Vec<f64>> {
        match self.send(image, QueryMode::Soft)? {
            QueryResponse::OkSoft { probs } => Ok(probs),
            other => Err(Error::InvalidInput(format!("unexpected response {other:?}"))),
        }
    }

    fn queries(&self) -> u64 {
        self.queries
    }

    fn detections(&self) -> u64 {
        self.gateway.detection_count() - self.initial_detections
    }

    fn classes(&self) -> usize {
        self.gateway.classes()
    }
}

#[derive(Debug, Clone)]
pub enum AttackSpec {
    /// Benign replay of the dataset (false-flag baseline).
    None { stream_len: usize },
    Nes(NesParams),
    Boundary(BoundaryParams),
    Surrogate(SurrogateParams),
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None { .. } => "none",
            AttackSpec::Nes(_) => "nes",
            AttackSpec::Boundary(_) => "boundary",
            AttackSpec::Surrogate(_) => "surrogate",
        }
    }
}

/// Trained artifacts an episode runs against.
pub struct Artifacts {
    pub classifier: NetModel,
    /// None = raw-pixel detector metric.
    pub encoder: Option<NetModel>,
    pub detector: DetectorConfig,
    /// Threshold for the paired raw-pixel baseline replay, when wanted.
    pub raw_threshold: Option<f64>,
    /// Victim/seed pool (held-out set).
    pub dataset: Dataset,
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub attack: AttackSpec,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub attack: String,
    pub success_rate: f64,
    pub mean_queries: f64,
    pub sd_queries: f64,
    pub mean_detections: f64,
    pub raw_l2_detections: f64,
    pub mean_accounts: f64,
    pub mean_distortion: f64,
}

fn pick_victim<R: Rng>(dataset: &Dataset, rng: &mut R) -> (usize, usize) {
    let idx = rng.gen_range(0..dataset.len());
    (idx, dataset.labels[idx])
}

fn pick_seed_of_class<R: Rng>(dataset: &Dataset, class: usize, rng: &mut R) -> Option<usize> {
    let candidates: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.labels[i] == class)
        .collect();
    candidates.choose(rng).copied()
}

/// Replay a recorded pixel stream through a second detector instance with
/// the raw-pixel metric, counting flags (fresh account per ban).
fn raw_l2_replay(stream: &[Vec<f64>], config: &DetectorConfig, raw_threshold: f64) -> u64 {
    let raw = DetectorConfig { threshold: raw_threshold, ..config.clone() };
    let mut state = AccountState::new(0);
    let mut flags = 0;
    for (i, pixels) in stream.iter().enumerate() {
        let encoding = Encoding { values: pixels.clone() };
        match process_query(&mut state, &encoding, &raw, i as f64) {
            Ok(Decision::Flagged(_)) => {
                flags += 1;
                state.pending_ban_at = None; // re-registration: keep streaming
            }
            Ok(Decision::Ok) => {}
            Err(_) => {
                state = AccountState::new(state.account_id + 1);
            }
        }
    }
    flags
}

pub fn run_episode(artifacts: &Artifacts, config: &EpisodeConfig) -> Result<EpisodeReport> {
    if config.trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if artifacts.dataset.is_empty() {
        return Err(Error::InvalidInput("empty victim pool".into()));
    }
    if artifacts.classifier.input_dim() != artifacts.dataset.shape.dim() {
        return Err(Error::ShapeMismatch("classifier does not match dataset".into()));
    }
    let soft_enabled = matches!(
        &config.attack,
        AttackSpec::Nes(p) if matches!(p.blinding, Blinding::Extrapolate { .. })
    );

    let mut successes = 0usize;
    let mut queries: Vec<f64> = Vec::new();
    let mut detections: Vec<f64> = Vec::new();
    let mut raw_detections: Vec<f64> = Vec::new();
    let mut accounts: Vec<f64> = Vec::new();
    let mut distortions: Vec<f64> = Vec::new();

    for trial in 0..config.trials {
        let mut rng = RootSeed(config.seed).stream_indexed("episode-trial", trial as u64);
        let mut gateway = Gateway::new(
            artifacts.classifier.clone(),
            artifacts.encoder.clone(),
            artifacts.detector.clone(),
            artifacts.dataset.shape,
            soft_enabled,
        )?;
        let mut oracle = ReRegisteringOracle::new(&mut gateway);

        let trace: Option<AttackTrace> = match &config.attack {
            AttackSpec::None { stream_len } => {
                let mut order: Vec<usize> = (0..artifacts.dataset.len()).collect();
                order.shuffle(&mut rng);
                for j in 0..*stream_len {
                    let img = &artifacts.dataset.images[order[j % order.len()]];
                    oracle.hard(img)?;
                }
                None
            }
            AttackSpec::Nes(params) => {
                let (victim, label) = pick_victim(&artifacts.dataset, &mut rng);
                let target = (label + 1 + rng.gen_range(0..artifacts.dataset.class_count - 1))
                    % artifacts.dataset.class_count;
                let seed_idx = pick_seed_of_class(&artifacts.dataset, target, &mut rng)
                    .ok_or_else(|| Error::InvalidInput("no seed image of target class".into()))?;
                let x = artifacts.dataset.images[victim].clone();
                let seed = artifacts.dataset.images[seed_idx].clone();
                Some(nes_attack(&mut oracle, &x, target, &seed, params, &mut rng)?)
            }
            AttackSpec::Boundary(params) => {
                let (victim, label) = pick_victim(&artifacts.dataset, &mut rng);
                let target = (label + 1 + rng.gen_range(0..artifacts.dataset.class_count - 1))
                    % artifacts.dataset.class_count;
                let seed_idx = pick_seed_of_class(&artifacts.dataset, target, &mut rng)
                    .ok_or_else(|| Error::InvalidInput("no seed image of target class".into()))?;
                let x = artifacts.dataset.images[victim].clone();
                let seed = artifacts.dataset.images[seed_idx].clone();
                Some(boundary_attack(&mut oracle, &x, target, &seed, params, &mut rng)?)
            }
            AttackSpec::Surrogate(params) => {
                let (victim, label) = pick_victim(&artifacts.dataset, &mut rng);
                let x = artifacts.dataset.images[victim].clone();
                Some(hybrid_surrogate_attack(&mut oracle, &x, label, params, &mut rng)?)
            }
        };

        let trial_queries = oracle.queries() as f64;
        let trial_detections = oracle.detections() as f64;
        let stream = oracle.recorded_stream().to_vec();
        if let Some(t) = &trace {
            if t.success {
                successes += 1;
                distortions.push(t.linf_distortion);
            }
        } else {
            successes += 1; // benign replay always completes
        }
        queries.push(trial_queries);
        detections.push(trial_detections);
        accounts.push(trial_detections + 1.0);
        if let Some(raw) = artifacts.raw_threshold {
            raw_detections.push(raw_l2_replay(&stream, &artifacts.detector, raw) as f64);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_q = mean(&queries);
    let var = queries.iter().map(|q| (q - mean_q) * (q - mean_q)).sum::<f64>() / queries.len() as f64;
    Ok(EpisodeReport {
        attack: config.attack.name().to_string(),
        success_rate: successes as f64 / config.trials as f64,
        mean_queries: mean_q,
        sd_queries: var.sqrt(),
        mean_detections: mean(&detections),
        raw_l2_detections: if raw_detections.is_empty() { 0.0 } else { mean(&raw_detections) },
        mean_accounts: mean(&accounts),
        mean_distortion: if distortions.is_empty() { 0.0 } else { mean(&distortions) },
    })
}
