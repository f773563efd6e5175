//! Service facade binding classifier and monitor: account lifecycle, query
//! endpoint with delayed-ban enforcement, state persistence, and a
//! newline-delimited wire protocol with an equivalent in-process transport.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::detector::{
    process_query, read_accounts, write_accounts, AccountState, Decision, DetectionEvent,
    DetectorConfig, QueryMetric,
};
use crate::error::{Error, Result};
use crate::models::{classify, classify_soft, Image, ImageShape};
use crate::numerics::NetModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Hard,
    Soft,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Hard => "hard",
            QueryMode::Soft => "soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(QueryMode::Hard),
            "soft" => Ok(QueryMode::Soft),
            other => Err(Error::Format(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRequest {
    pub account_id: u64,
    pub pixels: Vec<f64>,
    pub mode: QueryMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryResponse {
    Ok { label: usize },
    OkSoft { probs: Vec<f64> },
    Banned,
}

/// The defended service. The encoder and threshold never appear in any
/// response; the only externally observable defense signal is ban timing.
pub struct Gateway {
    classifier: NetModel,
    encoder: Option<NetModel>,
    config: DetectorConfig,
    soft_enabled: bool,
    shape: ImageShape,
    accounts: HashMap<u64, AccountState>,
    next_account_id: u64,
    events: Vec<DetectionEvent>,
    clock: f64,
}

impl Gateway {
    /// `encoder: None` runs the raw-pixel baseline metric.
    pub fn new(
        classifier: NetModel,
        encoder: Option<NetModel>,
        config: DetectorConfig,
        shape: ImageShape,
        soft_enabled: bool,
    ) -> Result<Self> {
        config.validate()?;
        if classifier.input_dim() != shape.dim() {
            return Err(Error::ShapeMismatch("classifier input != image shape".into()));
        }
        Ok(Self {
            classifier,
            encoder,
            config,
            soft_enabled,
            shape,
            accounts: HashMap::new(),
            next_account_id: 1,
            events: Vec::new(),
            clock: 0.0,
        })
    }

    pub fn create_account(&mut self) -> u64 {
        let id = self.next_account_id;
        self.next_account_id += 1;
        self.accounts.insert(id, AccountState::new(id));
        id
    }

    pub fn account_count(&self) -> usize {
        self.accounts.len()
    }

    pub fn events(&self) -> &[DetectionEvent] {
        &self.events
    }

    pub fn detection_count(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    /// Advance the service clock (hours); used by time-bounded buffers.
    pub fn set_time(&mut self, hours: f64) {
        self.clock = hours;
    }

    pub fn handle_query(&mut self, request: &QueryRequest) -> Result<QueryResponse> {
        if request.pixels.len() != self.shape.dim() {
            return Err(Error::InvalidInput(format!(
                "payload length {} != {}",
                request.pixels.len(),
                self.shape.dim()
            )));
        }
        if request.mode == QueryMode::Soft && !self.soft_enabled {
            return Err(Error::InvalidInput("soft mode disabled".into()));
        }
        let image = Image::new(request.pixels.clone(), self.shape)?;
        let metric = match &self.encoder {
            Some(net) => QueryMetric::Encoder(net),
            None => QueryMetric::RawL2,
        };
        let encoding = metric.encode_query(&image)?;
        let state = self
            .accounts
            .get_mut(&request.account_id)
            .ok_or(Error::UnknownAccount(request.account_id))?;
        match process_query(state, &encoding, &self.config, self.clock) {
            Ok(Decision::Ok) => {}
            Ok(Decision::Flagged(event)) => self.events.push(event),
            Err(Error::Banned(_)) => return Ok(QueryResponse::Banned),
            Err(e) => return Err(e),
        }
        // detection is never disclosed before the ban fires: the flagged
        // query is answered like any other
        Ok(match request.mode {
            QueryMode::Hard => QueryResponse::Ok { label: classify(&self.classifier, &image)? },
            QueryMode::Soft => QueryResponse::OkSoft { probs: classify_soft(&self.classifier, &image)? },
        })
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.next_account_id.to_le_bytes())?;
        file.write_all(&self.clock.to_le_bytes())?;
        let mut ordered: Vec<AccountState> = self.accounts.values().cloned().collect();
        ordered.sort_by_key(|a| a.account_id);
        write_accounts(&mut file, &ordered)?;
        file.write_all(&(self.events.len() as u64).to_le_bytes())?;
        for e in &self.events {
            file.write_all(&e.account_id.to_le_bytes())?;
            file.write_all(&e.query_index.to_le_bytes())?;
            file.write_all(&e.distance.to_le_bytes())?;
            file.write_all(&e.timestamp.to_le_bytes())?;
        }
        Ok(())
    }

    /// Restore account state into a gateway built with the same artifacts.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 16 {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let next = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let clock = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut rest: &[u8] = &bytes[16..];
        let accounts = read_accounts(&mut rest)?;
        let mut u64_field = || -> Result<[u8; 8]> {
            if rest.len() < 8 {
                return Err(Error::Format("snapshot truncated".into()));
            }
            let (head, tail) = rest.split_at(8);
            rest = tail;
            Ok(head.try_into().unwrap())
        };
        let n_events = u64::from_le_bytes(u64_field()?) as usize;
        let mut events = Vec::with_capacity(n_events.min(1 << 20));
        for _ in 0..n_events {
            events.push(crate::detector::DetectionEvent {
                account_id: u64::from_le_bytes(u64_field()?),
                query_index: u64::from_le_bytes(u64_field()?),
                distance: f64::from_le_bytes(u64_field()?),
                timestamp: f64::from_le_bytes(u64_field()?),
            });
        }
        self.next_account_id = next;
        self.clock = clock;
        self.accounts = accounts.into_iter().map(|a| (a.account_id, a)).collect();
        self.events = events;
        Ok(())
    }
}

pub fn encode_payload(pixels: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(pixels.len() * 4);
    for p in pixels {
        bytes.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_payload(payload: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("payload not a float32 array".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

/// Wire records, one per line, space-separated with `-` placeholders:
///   `create`
///   `query <account-id> <mode> <payload>`
///   `response <account-id> <mode> <payload> <status> <label>`
pub fn handle_line(gateway: &mut Gateway, line: &str) -> String {
    match handle_line_inner(gateway, line) {
        Ok(s) => s,
        Err(e) => format!("response - - - error {e}").replace('\n', " "),
    }
}

fn handle_line_inner(gateway: &mut Gateway, line: &str) -> Result<String> {
    let fields: Vec<&str> = line.trim_end().split(' ').collect();
    match fields.first().copied() {
        Some("create") => {
            let id = gateway.create_account();
            Ok(format!("response {id} - - ok -"))
        }
        Some("query") if fields.len() == 4 => {
            let account_id: u64 = fields[1]
                .parse()
                .map_err(|_| Error::Format("bad account id".into()))?;
            let mode = QueryMode::parse(fields[2])?;
            let pixels = decode_payload(fields[3])?;
            let request = QueryRequest { account_id, pixels, mode };
            Ok(match gateway.handle_query(&request)? {
                QueryResponse::Ok { label } => {
                    format!("response {account_id} hard - ok {label}")
                }
                QueryResponse::OkSoft { probs } => {
                    format!("response {account_id} soft {} ok -", encode_payload(&probs))
                }
                QueryResponse::Banned => format!("response {account_id} {} - banned -", mode.name()),
            })
        }
        _ => Err(Error::Format(format!("bad request line {line:?}"))),
    }
}

/// In-process transport: the same line protocol without a socket.
pub struct InProcessTransport<'a> {
    gateway: &'a mut Gateway,
}

impl<'a> InProcessTransport<'a> {
    pub fn new(gateway: &'a mut Gateway) -> Self {
        Self { gateway }
    }

    pub fn round_trip(&mut self, line: &str) -> String {
        handle_line(self.gateway, line)
    }
}

/// Serve the line protocol on a TCP listener until `stop` is raised.
/// Connections are handled sequentially; requests within a connection are
/// serialized, which gives per-account ordering.
pub fn serve(gateway: &Mutex<Gateway>, listener: TcpListener, stop: &AtomicBool) -> Result<()> {
    listener.set_nonblocking(true)?;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let _ = serve_connection(gateway, stream);
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(std::time::Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn serve_connection(gateway: &Mutex<Gateway>, stream: TcpStream) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            break;
        }
        let response = handle_line(&mut gateway.lock().unwrap(), &line);
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
