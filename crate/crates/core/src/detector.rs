//! Stateful query monitor: per-account encoded-query buffers, k-NN mean
//! distance flagging against a calibrated threshold, buffer reset on
//! detection, delayed-ban scheduling, and side-channel/storage accounting.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::{encode, Encoding};
use crate::error::{Error, Result};
use crate::models::Image;
use crate::numerics::{l2_dist, NetModel};

/// History retention policy for per-account buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BufferPolicy {
    /// Keep at most N entries (circular).
    QueryBounded(usize),
    /// Keep entries at most this many hours.
    TimeBounded(f64),
}

/// When a scheduled ban fires, relative to the detection query index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BanPolicy {
    Immediate,
    PowerOfTwo,
    /// Ban at the smallest ceil(offset * base^i) >= detection index.
    Geometric { base: f64, offset: f64 },
}

/// Distance space for the k-NN test. `RawL2` is the baseline comparison
/// detector operating directly on image pixels.
pub enum QueryMetric<'a> {
    Encoder(&'a NetModel),
    RawL2,
}

impl QueryMetric<'_> {
    pub fn encode_query(&self, image: &Image) -> Result<Encoding> {
        match self {
            QueryMetric::Encoder(net) => encode(net, image),
            QueryMetric::RawL2 => Ok(Encoding {
                values: image.pixels().to_vec(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub k: usize,
    pub threshold: f64,
    pub buffer_policy: BufferPolicy,
    pub fpr_target: f64,
    pub ban_policy: BanPolicy,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.threshold <= 0.0 {
            return Err(Error::InvalidConfig("threshold must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.fpr_target) {
            return Err(Error::InvalidConfig("fpr target must be in (0,1)".into()));
        }
        if let BanPolicy::Geometric { base, .. } = self.ban_policy {
            if base <= 1.0 {
                return Err(Error::InvalidConfig("geometric base must be > 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub encoding: Encoding,
    pub arrival_index: u64,
    pub arrival_time: f64,
}

/// Per-account defender state. Queries within an account are serialized;
/// accounts are independent.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountState {
    pub account_id: u64,
    pub buffer: Vec<BufferEntry>,
    pub detection_count: u64,
    pub banned: bool,
    pub pending_ban_at: Option<u64>,
    /// Total queries this account has made (1-based index of the last query).
    pub queries_seen: u64,
}

impl AccountState {
    pub fn new(account_id: u64) -> Self {
        Self {
            account_id,
            buffer: Vec::new(),
            detection_count: 0,
            banned: false,
            pending_ban_at: None,
            queries_seen: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub account_id: u64,
    pub query_index: u64,
    pub distance: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Ok,
    Flagged(DetectionEvent),
}

/// Mean l2 distance from the query to its min(k, |buffer|) nearest stored
/// encodings. Ties between equal distances break by earlier arrival index.
/// Empty buffer yields +inf (no flag possible).
pub fn knn_mean_distance(buffer: &[BufferEntry], query: &Encoding, k: usize) -> f64 {
    if buffer.is_empty() {
        return f64::INFINITY;
    }
    let mut dists: Vec<(f64, u64)> = buffer
        .iter()
        .map(|e| (l2_dist(&e.encoding.values, &query.values), e.arrival_index))
        .collect();
    dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let take = k.min(dists.len());
    dists[..take].iter().map(|(d, _)| d).sum::<f64>() / take as f64
}

/// Process one query for an account. The encoding is rounded to 16-bit
/// storage precision before entering the buffer. `now` is in hours.
///
/// A flagged query's own encoding is not retained: the whole buffer,
/// including it, is cleared. Flagging is suppressed until the buffer holds at
/// least k prior encodings.
pub fn process_query(
    state: &mut AccountState,
    encoding: &Encoding,
    config: &DetectorConfig,
    now: f64,
) -> Result<Decision> {
    if state.banned {
        return Err(Error::Banned(state.account_id));
    }
    let query_index = state.queries_seen + 1;
    if let Some(ban_at) = state.pending_ban_at {
        if query_index > ban_at {
            state.banned = true;
            return Err(Error::Banned(state.account_id));
        }
    }
    state.queries_seen = query_index;
    evict(state, config, now);
    let prior = state.buffer.len();
    let stored = encoding.to_storage_precision();
    let distance = knn_mean_distance(&state.buffer, &stored, config.k);
    if prior >= config.k && distance < config.threshold {
        state.detection_count += 1;
        state.buffer.clear();
        let ban_at = apply_ban_policy(&config.ban_policy, query_index);
        state.pending_ban_at = Some(state.pending_ban_at.map_or(ban_at, |b| b.min(ban_at)));
        return Ok(Decision::Flagged(DetectionEvent {
            account_id: state.account_id,
            query_index,
            distance,
            timestamp: now,
        }));
    }
    state.buffer.push(BufferEntry {
        encoding: stored,
        arrival_index: query_index,
        arrival_time: now,
    });
    Ok(Decision::Ok)
}

fn evict(state: &mut AccountState, config: &DetectorConfig, now: f64) {
    match config.buffer_policy {
        BufferPolicy::QueryBounded(n) => {
            // Keep room for the incoming entry.
            let keep = n.saturating_sub(1);
            if state.buffer.len() > keep {
                let drop = state.buffer.len() - keep;
                state.buffer.drain(..drop);
            }
        }
        BufferPolicy::TimeBounded(hours) => {
            state.buffer.retain(|e| now - e.arrival_time <= hours);
        }
    }
}

/// Scheduled ban index for a detection at `query_index`.
pub fn apply_ban_policy(policy: &BanPolicy, query_index: u64) -> u64 {
    match policy {
        BanPolicy::Immediate => query_index,
        BanPolicy::PowerOfTwo => query_index.next_power_of_two(),
        BanPolicy::Geometric { base, offset } => {
            let mut i = 0;
            loop {
                // Round-off guard: 50 * 1.1 = 55.000000000000007 must ceil to 55.
                let at = (offset * base.powi(i) - 1e-9).ceil().max(1.0) as u64;
                if at >= query_index {
                    return at;
                }
                i += 1;
            }
        }
    }
}

/// Calibrate the flagging threshold so that streaming the shuffled benign
/// encoding set through a fresh buffer flags the fpr-target fraction.
pub fn calibrate_threshold<R: Rng>(
    encodings: &[Encoding],
    k: usize,
    fpr_target: f64,
    buffer_policy: BufferPolicy,
    rng: &mut R,
) -> Result<f64> {
    let distances = streamed_knn_distances(encodings, &[k], buffer_policy, rng)?;
    threshold_from_distances(&distances[0].1, fpr_target)
}

/// Thresholds for a list of k values over one identical shuffled stream.
pub fn k_sweep<R: Rng>(
    encodings: &[Encoding],
    k_list: &[usize],
    fpr_target: f64,
    buffer_policy: BufferPolicy,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    let per_k = streamed_knn_distances(encodings, k_list, buffer_policy, rng)?;
    per_k
        .into_iter()
        .map(|(k, d)| threshold_from_distances(&d, fpr_target).map(|t| (k, t)))
        .collect()
}

fn streamed_knn_distances<R: Rng>(
    encodings: &[Encoding],
    k_list: &[usize],
    buffer_policy: BufferPolicy,
    rng: &mut R,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if encodings.is_empty() || k_list.is_empty() {
        return Err(Error::InvalidInput("empty calibration inputs".into()));
    }
    let max_k = *k_list.iter().max().unwrap();
    let mut order: Vec<usize> = (0..encodings.len()).collect();
    order.shuffle(rng);
    let mut buffer: Vec<BufferEntry> = Vec::new();
    let mut out: Vec<(usize, Vec<f64>)> = k_list.iter().map(|&k| (k, Vec::new())).collect();
    for (step, &idx) in order.iter().enumerate() {
        let now = step as f64;
        match buffer_policy {
            BufferPolicy::QueryBounded(n) => {
                let keep = n.saturating_sub(1);
                if buffer.len() > keep {
                    let drop = buffer.len() - keep;
                    buffer.drain(..drop);
                }
            }
            BufferPolicy::TimeBounded(hours) => buffer.retain(|e| now - e.arrival_time <= hours),
        }
        let stored = encodings[idx].to_storage_precision();
        if !buffer.is_empty() {
            let mut dists: Vec<(f64, u64)> = buffer
                .iter()
                .map(|e| (l2_dist(&e.encoding.values, &stored.values), e.arrival_index))
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut prefix = 0.0;
            let mut prefix_means = vec![f64::INFINITY; max_k.min(dists.len())];
            for (i, (d, _)) in dists.iter().take(max_k).enumerate() {
                prefix += d;
                prefix_means[i] = prefix / (i + 1) as f64;
            }
            for (k, dest) in out.iter_mut() {
                // Record only where flagging would be possible (>= k priors).
                if buffer.len() >= *k {
                    dest.push(prefix_means[*k - 1]);
                }
            }
        }
        buffer.push(BufferEntry {
            encoding: stored,
            arrival_index: step as u64 + 1,
            arrival_time: now,
        });
    }
    Ok(out)
}

fn threshold_from_distances(distances: &[f64], fpr_target: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&fpr_target) {
        return Err(Error::InvalidConfig("fpr target must be in [0,1)".into()));
    }
    let mut sorted = distances.to_vec();
    if sorted.is_empty() {
        return Err(Error::InvalidInput("stream too short for calibration".into()));
    }
    if fpr_target > 0.0 && (sorted.len() as f64) * fpr_target < 1.0 {
        return Err(Error::InvalidInput(format!(
            "stream of {} too short for fpr target {fpr_target}",
            sorted.len()
        )));
    }
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if fpr_target == 0.0 {
        // Strictly below the minimum observed distance: never flags.
        return Ok((sorted[0] * (1.0 - 1e-9)).max(0.0).max(sorted[0] - 1e-12) - 1e-12);
    }
    let idx = ((sorted.len() as f64) * fpr_target).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Distinguishable-cancellation-point information revealed per account ban.
pub fn side_channel_bits(policy: &BanPolicy, max_queries: u64) -> f64 {
    let m = max_queries as f64;
    match policy {
        BanPolicy::Immediate => (m - 50.0).max(1.0).log2(),
        BanPolicy::PowerOfTwo => ((m.log2().floor()) + 1.0).log2(),
        BanPolicy::Geometric { base, offset } => ((m / offset).ln() / base.ln()).log2(),
    }
    .max(0.0)
}

impl BanPolicy {
    pub fn bits(self, max_queries: u64) -> f64 {
        side_channel_bits(&self, max_queries)
    }
}

/// Entropy-optimal probing attacker: issue k priming queries, then queries
/// that each trigger detection with probability p. Returns (bits revealed per
/// account, expected queries per account).
pub fn optimal_attacker_side_channel(p: f64, k: usize) -> (f64, f64) {
    assert!(p > 0.0 && p < 1.0);
    let q = 1.0 - p;
    let entropy = (-q * q.log2() - p * p.log2()) / p;
    (entropy, k as f64 + 1.0 / p)
}

/// Buffer storage footprint in bytes for a query-rate/duration bound.
pub fn buffer_storage_bytes(d: usize, precision_bytes: usize, rate_per_minute: f64, hours: f64) -> f64 {
    rate_per_minute * 60.0 * hours * d as f64 * precision_bytes as f64
}

/// Monthly storage cost in dollars at a $/GB/month unit price (decimal GB).
pub fn storage_cost_per_month(bytes: f64, price_per_gb_month: f64) -> f64 {
    bytes / 1e9 * price_per_gb_month
}

/// Append detection events to a line-delimited log:
/// `account-id query-index distance timestamp` per line.
pub fn append_event_log<W: Write>(w: &mut W, events: &[DetectionEvent]) -> Result<()> {
    for e in events {
        writeln!(w, "{} {} {:.9} {:.6}", e.account_id, e.query_index, e.distance, e.timestamp)?;
    }
    Ok(())
}

const STATE_MAGIC: &[u8; 4] = b"SGDS";
const STATE_VERSION: u32 = 1;

/// Snapshot a set of account states to a versioned binary stream.
pub fn write_accounts<W: Write>(w: &mut W, accounts: &[AccountState]) -> Result<()> {
    w.write_all(STATE_MAGIC)?;
    w.write_all(&STATE_VERSION.to_le_bytes())?;
    w.write_all(&(accounts.len() as u64).to_le_bytes())?;
    for a in accounts {
        w.write_all(&a.account_id.to_le_bytes())?;
        w.write_all(&[a.banned as u8, a.pending_ban_at.is_some() as u8])?;
        w.write_all(&a.pending_ban_at.unwrap_or(0).to_le_bytes())?;
        w.write_all(&a.detection_count.to_le_bytes())?;
        w.write_all(&a.queries_seen.to_le_bytes())?;
        w.write_all(&(a.buffer.len() as u64).to_le_bytes())?;
        for e in &a.buffer {
            w.write_all(&e.arrival_index.to_le_bytes())?;
            w.write_all(&e.arrival_time.to_le_bytes())?;
            w.write_all(&(e.encoding.values.len() as u32).to_le_bytes())?;
            for v in &e.encoding.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_accounts<R: Read>(r: &mut R) -> Result<Vec<AccountState>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(Error::Format("bad detector state magic".into()));
    }
    let version = read_u32(r)?;
    if version != STATE_VERSION {
        return Err(Error::Format(format!("unsupported state version {version}")));
    }
    let count = read_u64(r)?;
    let mut accounts = Vec::new();
    for _ in 0..count {
        let account_id = read_u64(r)?;
        let mut flags = [0u8; 2];
        r.read_exact(&mut flags)?;
        let ban_at = read_u64(r)?;
        let detection_count = read_u64(r)?;
        let queries_seen = read_u64(r)?;
        let buf_len = read_u64(r)?;
        let mut buffer = Vec::with_capacity(buf_len as usize);
        for _ in 0..buf_len {
            let arrival_index = read_u64(r)?;
            let arrival_time = read_f64(r)?;
            let dim = read_u32(r)? as usize;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(read_f64(r)?);
            }
            buffer.push(BufferEntry {
                encoding: Encoding { values },
                arrival_index,
                arrival_time,
            });
        }
        accounts.push(AccountState {
            account_id,
            buffer,
            detection_count,
            banned: flags[0] != 0,
            pending_ban_at: (flags[1] != 0).then_some(ban_at),
            queries_seen,
        });
    }
    Ok(accounts)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
