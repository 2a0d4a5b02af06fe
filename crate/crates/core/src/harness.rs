//! Scenario runner: batches of fetches across policies, latency CDFs,
//! analytic expectations and output files.

pub mod acceptance;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::middlebox::{CensorConfig, PolicyError, VerdictCounters};
use crate::netsim::serialization_time;
use crate::netsim::Micros;
use crate::quicstep::{
    FetchFailure, Lab, LabConfig, LabError, LegDelays, PolicyMode, DEFAULT_HOSTNAME,
};
use crate::wire::{ConnectionId, Frame, Header, Packet, MAX_STREAM_CHUNK};

/// Salt mixed into the trial seed for jitter draws, so jitter does not
/// correlate with protocol randomness.
const JITTER_SALT: u64 = 0x6a69_7474_6572;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Ohio,
    Oregon,
}

impl Profile {
    pub fn legs(self) -> LegDelays {
        match self {
            Profile::Ohio => LegDelays::ohio(),
            Profile::Oregon => LegDelays::oregon(),
        }
    }

    pub fn parse(s: &str) -> Option<Profile> {
        match s.to_ascii_lowercase().as_str() {
            "ohio" => Some(Profile::Ohio),
            "oregon" => Some(Profile::Oregon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub legs: LegDelays,
    /// Bytes per second on every link, 0 for unlimited.
    pub bandwidth: u64,
    pub loss_rate: f64,
    /// Per-trial uniform jitter on each leg delay, in percent.
    pub jitter_pct: f64,
    pub file_size: usize,
    pub trials: usize,
    pub policies: Vec<PolicyMode>,
    pub censor: CensorConfig,
    pub seed: u64,
    pub window: usize,
    pub max_retries: u32,
    pub hostname: String,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            legs: LegDelays::ohio(),
            bandwidth: 0,
            loss_rate: 0.0,
            jitter_pct: 10.0,
            file_size: 1_000_000,
            trials: 250,
            policies: PolicyMode::ALL.to_vec(),
            censor: CensorConfig::off(),
            seed: 1,
            window: 64,
            max_retries: 4,
            hostname: DEFAULT_HOSTNAME.into(),
            out_dir: None,
            trace: false,
        }
    }
}

/// Parses `1000000`, `1MB`, `10mb`, `64KB` (decimal units).
pub fn parse_size(s: &str) -> Option<usize> {
    let t = s.trim().to_ascii_lowercase();
    let (num, mult) = if let Some(n) = t.strip_suffix("mb") {
        (n, 1_000_000)
    } else if let Some(n) = t.strip_suffix("kb") {
        (n, 1_000)
    } else if let Some(n) = t.strip_suffix('b') {
        (n, 1)
    } else {
        (t.as_str(), 1)
    };
    num.trim().parse::<usize>().ok()?.checked_mul(mult)
}

impl ExperimentConfig {
    /// Parses the line-oriented `key value` format. A `profile` line is
    /// applied before any per-leg override regardless of position. Censor
    /// policy keys are accepted bare or with a `censor_` prefix.
    pub fn parse(text: &str) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k.to_ascii_lowercase(), v.trim().to_string()),
                None => (line.to_ascii_lowercase(), String::new()),
            };
            lines.push((i + 1, key, value));
        }
        for (line, key, value) in &lines {
            if key == "profile" {
                let p = Profile::parse(value).ok_or_else(|| HarnessError::Config {
                    line: *line,
                    msg: format!("unknown profile `{value}`"),
                })?;
                cfg.legs = p.legs();
            }
        }
        let mut policies = Vec::new();
        for (line, key, value) in lines {
            let err = |msg: String| HarnessError::Config { line, msg };
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| err(format!("`{key}` expects an integer, got `{v}`")))
            };
            match key.as_str() {
                "profile" => {}
                "client_censor_us" => cfg.legs.client_censor = num(&value)?,
                "censor_server_us" => cfg.legs.censor_server = num(&value)?,
                "censor_proxy_us" => cfg.legs.censor_proxy = num(&value)?,
                "proxy_server_us" => cfg.legs.proxy_server = num(&value)?,
                "censor_resolver_us" => cfg.legs.censor_resolver = num(&value)?,
                "proxy_resolver_us" => cfg.legs.proxy_resolver = num(&value)?,
                "roam_server_us" => cfg.legs.roam_server = num(&value)?,
                "bandwidth" => cfg.bandwidth = num(&value)?,
                "loss" => {
                    cfg.loss_rate = value
                        .parse()
                        .map_err(|_| err(format!("bad loss rate `{value}`")))?
                }
                "jitter" => {
                    cfg.jitter_pct = value
                        .parse()
                        .map_err(|_| err(format!("bad jitter `{value}`")))?
                }
                "file_size" => {
                    cfg.file_size =
                        parse_size(&value).ok_or_else(|| err(format!("bad size `{value}`")))?
                }
                "trials" => cfg.trials = num(&value)? as usize,
                "policy" => policies.push(
                    value
                        .parse::<PolicyMode>()
                        .map_err(|e| err(e.to_string()))?,
                ),
                "seed" => cfg.seed = num(&value)?,
                "window" => cfg.window = num(&value)? as usize,
                "max_retries" => cfg.max_retries = num(&value)? as u32,
                "hostname" => cfg.hostname = value,
                "out" => cfg.out_dir = Some(PathBuf::from(value)),
                "trace" => {
                    cfg.trace = match value.as_str() {
                        "" | "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(err(format!("bad boolean `{value}`"))),
                    }
                }
                _ => match cfg
                    .censor
                    .apply_line(key.strip_prefix("censor_").unwrap_or(&key), &value)
                {
                    Ok(true) => {}
                    Ok(false) => return Err(err(format!("unknown key `{key}`"))),
                    Err(msg) => return Err(err(msg)),
                },
            }
        }
        if !policies.is_empty() {
            policies.sort();
            policies.dedup();
            cfg.policies = policies;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Invalid(m.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.file_size == 0 {
            return bad("file_size must be at least 1");
        }
        if self.policies.is_empty() {
            return bad("no policies selected");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss must be within [0, 1]");
        }
        if !(0.0..=100.0).contains(&self.jitter_pct) {
            return bad("jitter must be within [0, 100] percent");
        }
        self.censor.validate()?;
        Ok(())
    }

    /// Lab settings for one trial; jitter is drawn from the trial seed so
    /// every policy sees the same network in a given trial.
    pub fn lab_config(&self, trial: usize) -> LabConfig {
        let seed = self.trial_seed(trial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ JITTER_SALT);
        LabConfig {
            legs: self.legs.jittered(self.jitter_pct, &mut rng),
            bandwidth: self.bandwidth,
            loss_rate: self.loss_rate,
            lossy_legs: Vec::new(),
            censor: self.censor.clone(),
            capture: false,
            seed,
            file_size: self.file_size,
            window: self.window,
            max_retries: self.max_retries,
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed ^ trial as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencySample {
    pub policy: PolicyMode,
    pub trial: usize,
    pub success: bool,
    pub completion_us: Option<Micros>,
    pub first_byte_us: Option<Micros>,
    pub reason: Option<FetchFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub sample: LatencySample,
    pub counters: VerdictCounters,
    pub trace_digest: String,
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResult {
    /// Sorted by (policy, trial).
    pub samples: Vec<LatencySample>,
    pub counters: BTreeMap<PolicyMode, VerdictCounters>,
    pub digests: BTreeMap<(PolicyMode, usize), String>,
    pub traces: BTreeMap<(PolicyMode, usize), String>,
}

impl ExperimentResult {
    pub fn for_policy(&self, p: PolicyMode) -> impl Iterator<Item = &LatencySample> {
        self.samples.iter().filter(move |s| s.policy == p)
    }

    pub fn successes(&self, p: PolicyMode) -> usize {
        self.for_policy(p).filter(|s| s.success).count()
    }

    pub fn completion(&self, p: PolicyMode, trial: usize) -> Option<Micros> {
        self.for_policy(p)
            .find(|s| s.trial == trial)
            .and_then(|s| s.completion_us)
    }
}

/// Runs one fetch in a fresh lab.
pub fn run_trial(
    cfg: &ExperimentConfig,
    policy: PolicyMode,
    trial: usize,
) -> Result<TrialRecord, HarnessError> {
    let mut lab = Lab::build(cfg.lab_config(trial))?;
    let mut req = lab.request(policy);
    req.hostname.clone_from(&cfg.hostname);
    let out = lab.fetch(req)?;
    Ok(TrialRecord {
        sample: LatencySample {
            policy,
            trial,
            success: out.success,
            completion_us: out.completion_time,
            first_byte_us: out.first_byte_time,
            reason: out.failure,
        },
        counters: lab.censor().state.counters,
        trace_digest: lab.sim.trace_digest(),
        trace: cfg.trace.then(|| lab.sim.export_trace()),
    })
}

/// Runs every policy for every trial, in parallel.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    // surface topology errors before spending time on trials
    Lab::build(cfg.lab_config(0))?;
    let jobs: Vec<(PolicyMode, usize)> = cfg
        .policies
        .iter()
        .flat_map(|p| (0..cfg.trials).map(move |t| (*p, t)))
        .collect();
    let records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|(p, t)| run_trial(cfg, *p, *t))
        .collect::<Result<_, _>>()?;
    let mut res = ExperimentResult::default();
    for r in records {
        let key = (r.sample.policy, r.sample.trial);
        res.counters.entry(key.0).or_default().merge(&r.counters);
        res.digests.insert(key, r.trace_digest);
        if let Some(t) = r.trace {
            res.traces.insert(key, t);
        }
        res.samples.push(r.sample);
    }
    res.samples.sort_by_key(|s| (s.policy, s.trial));
    Ok(res)
}

/// Encoded size of a full data packet.
pub fn data_packet_size() -> usize {
    packet_size(vec![Frame::Stream {
        stream_id: 0,
        offset: 0,
        fin: false,
        data: vec![0; MAX_STREAM_CHUNK],
    }])
}

fn packet_size(frames: Vec<Frame>) -> usize {
    Packet {
        header: Header::Short {
            dcid: ConnectionId::default(),
            pn: 0,
        },
        frames,
    }
    .encoded_len()
}

fn ack_packet_size() -> usize {
    packet_size(vec![Frame::Ack {
        largest_acked: 0,
        acked: vec![0; 8],
    }])
}

/// Bytes added by the tunnel around an inner datagram.
pub const TUNNEL_OVERHEAD: usize =
    crate::wire::TUNNEL_HEADER_LEN + crate::wire::ENVELOPE_HEADER_LEN;

/// Expected completion time of a lossless, jitter-free fetch.
///
/// Control traffic is closed form: the time the request reaches the server
/// is a fixed number of round trips per policy. The response is
/// `ceil(S / 1200)` packets under a window of `W`, each ACKed on arrival.
/// Packet `k >= W` leaves once the ACK for `k - W` is back, and every hop
/// serializes at `b`. With unlimited bandwidth this collapses to
/// `request + floor((n - 1) / W) * RTT + one_way`. Serialization of small
/// control packets is ignored, so finite-bandwidth runs land slightly
/// later than this estimate.
pub fn analytic_latency(policy: PolicyMode, cfg: &ExperimentConfig) -> Micros {
    let l = cfg.legs;
    let s = data_packet_size();
    let a = ack_packet_size();
    let o = TUNNEL_OVERHEAD;
    // (delay, data bytes, ack bytes) per hop, server side first
    let (request_at, hops): (Micros, Vec<(Micros, usize, usize)>) = match policy {
        PolicyMode::Native => (
            l.rtt_dns_direct() + l.rtt_direct() + l.censor_server + l.client_censor,
            vec![(l.censor_server, s, a), (l.client_censor, s, a)],
        ),
        PolicyMode::FullTunnel => (
            l.rtt_dns_tunnel() + l.rtt_tunnel() + l.proxy_server + l.censor_proxy + l.client_censor,
            vec![
                (l.proxy_server, s, a),
                (l.censor_proxy, s + o, a + o),
                (l.client_censor, s + o, a + o),
            ],
        ),
        PolicyMode::Quicstep => (
            l.rtt_dns_tunnel()
                + l.rtt_tunnel()
                + l.censor_server
                + l.client_censor
                + l.rtt_direct(),
            vec![(l.censor_server, s, a), (l.client_censor, s, a)],
        ),
    };
    let n = cfg.file_size.div_ceil(MAX_STREAM_CHUNK).max(1);
    let last_size = s - MAX_STREAM_CHUNK + (cfg.file_size - (n - 1) * MAX_STREAM_CHUNK);
    let ser = |bytes: usize| serialization_time(bytes, cfg.bandwidth);
    let mut fwd_busy = vec![0 as Micros; hops.len()];
    let mut rev_busy = vec![0 as Micros; hops.len()];
    let mut ack_back: Vec<Micros> = Vec::with_capacity(n);
    let mut last_arrival = 0;
    for k in 0..n {
        let mut t = if k >= cfg.window {
            ack_back[k - cfg.window]
        } else {
            0
        };
        for (h, (delay, data, _)) in hops.iter().enumerate() {
            let size = if k == n - 1 {
                data - s + last_size
            } else {
                *data
            };
            t = t.max(fwd_busy[h]) + ser(size);
            fwd_busy[h] = t;
            t += delay;
        }
        last_arrival = t;
        for (h, (delay, _, ack)) in hops.iter().enumerate().rev() {
            t = t.max(rev_busy[h]) + ser(*ack);
            rev_busy[h] = t;
            t += delay;
        }
        ack_back.push(t);
    }
    request_at + last_arrival
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    pub policy: PolicyMode,
    /// (completion µs, cumulative fraction), strictly increasing in both.
    pub points: Vec<(Micros, f64)>,
    pub successes: usize,
    pub failures: usize,
}

impl CdfSeries {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Empirical CDF of successful completion times per policy.
pub fn compute_cdf(samples: &[LatencySample]) -> BTreeMap<PolicyMode, CdfSeries> {
    let mut by: BTreeMap<PolicyMode, (Vec<Micros>, usize)> = BTreeMap::new();
    for s in samples {
        let e = by.entry(s.policy).or_default();
        match (s.success, s.completion_us) {
            (true, Some(t)) => e.0.push(t),
            _ => e.1 += 1,
        }
    }
    by.into_iter()
        .map(|(policy, (mut times, failures))| {
            times.sort_unstable();
            let n = times.len();
            let mut points: Vec<(Micros, f64)> = Vec::new();
            for (idx, t) in times.iter().enumerate() {
                let frac = (idx + 1) as f64 / n as f64;
                match points.last_mut() {
                    Some(last) if last.0 == *t => last.1 = frac,
                    _ => points.push((*t, frac)),
                }
            }
            (
                policy,
                CdfSeries {
                    policy,
                    points,
                    successes: n,
                    failures,
                },
            )
        })
        .collect()
}

/// Nearest-rank quantile of successful completion times.
pub fn quantile(samples: &[LatencySample], policy: PolicyMode, q: f64) -> Option<Micros> {
    let mut t: Vec<Micros> = samples
        .iter()
        .filter(|s| s.policy == policy && s.success)
        .filter_map(|s| s.completion_us)
        .collect();
    if t.is_empty() {
        return None;
    }
    t.sort_unstable();
    let rank = ((q * t.len() as f64).ceil() as usize).clamp(1, t.len());
    Some(t[rank - 1])
}

pub const SAMPLES_HEADER: [&str; 6] = [
    "policy",
    "trial",
    "success",
    "completion_us",
    "first_byte_us",
    "reason",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_samples(path: &Path, samples: &[LatencySample]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SAMPLES_HEADER)?;
    for s in samples {
        w.write_record([
            s.policy.name().to_string(),
            s.trial.to_string(),
            s.success.to_string(),
            opt(s.completion_us),
            opt(s.first_byte_us),
            opt(s.reason),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LatencySample>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| HarnessError::Config {
            line: i + 2,
            msg: m,
        };
        let field = |n: usize| rec.get(n).unwrap_or("");
        let num = |s: &str| -> Result<Option<u64>, HarnessError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| bad(format!("bad number `{s}`")))
            }
        };
        out.push(LatencySample {
            policy: field(0)
                .parse()
                .map_err(|e: crate::quicstep::UnknownPolicy| bad(e.to_string()))?,
            trial: num(field(1))?.ok_or_else(|| bad("missing trial".into()))? as usize,
            success: field(2)
                .parse()
                .map_err(|_| bad(format!("bad flag `{}`", field(2))))?,
            completion_us: num(field(3))?,
            first_byte_us: num(field(4))?,
            reason: if field(5).is_empty() {
                None
            } else {
                Some(field(5).parse().map_err(bad)?)
            },
        });
    }
    Ok(out)
}

pub fn write_cdf(path: &Path, series: &CdfSeries) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["completion_us", "fraction"])?;
    for (t, f) in &series.points {
        w.write_record([t.to_string(), format!("{f:.6}")])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn ms(us: Micros) -> String {
    format!("{:.3}", us as f64 / 1000.0)
}

/// Human-readable summary: success rates, median and p90, censor verdict
/// counters and oracle deltas.
pub fn summary(cfg: &ExperimentConfig, res: &ExperimentResult) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "trials {}  file_size {}  seed {}  jitter {}%  bandwidth {}  loss {}\n",
        cfg.trials, cfg.file_size, cfg.seed, cfg.jitter_pct, cfg.bandwidth, cfg.loss_rate
    ));
    let modes: Vec<String> = cfg.censor.modes.iter().map(|m| m.to_string()).collect();
    s.push_str(&format!(
        "censor {}\n\n",
        if modes.is_empty() {
            "off".to_string()
        } else {
            modes.join(",")
        }
    ));
    for &p in &cfg.policies {
        let n = res.for_policy(p).count();
        let ok = res.successes(p);
        s.push_str(&format!("[{p}]\n"));
        s.push_str(&format!(
            "  success {ok}/{n} ({:.1}%)\n",
            100.0 * ok as f64 / n.max(1) as f64
        ));
        let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
        for smp in res.for_policy(p) {
            if let Some(r) = smp.reason {
                *reasons.entry(r.name()).or_default() += 1;
            }
        }
        for (r, c) in reasons {
            s.push_str(&format!("  failure {r} {c}\n"));
        }
        let med = quantile(&res.samples, p, 0.5);
        let p90 = quantile(&res.samples, p, 0.9);
        s.push_str(&format!(
            "  median_ms {}\n  p90_ms {}\n",
            opt(med.map(ms)),
            opt(p90.map(ms))
        ));
        let oracle = analytic_latency(p, cfg);
        s.push_str(&format!("  oracle_ms {}\n", ms(oracle)));
        if let Some(m) = med {
            s.push_str(&format!(
                "  median_minus_oracle_ms {:.3}\n",
                (m as f64 - oracle as f64) / 1000.0
            ));
        }
        let c = res.counters.get(&p).copied().unwrap_or_default();
        s.push_str(&format!(
            "  censor forwarded {} drop_handshake {} drop_sni {} drop_dns {} drop_unknown_cid {}\n\n",
            c.forwarded, c.handshake, c.sni, c.dns, c.unknown_cid
        ));
    }
    s
}

/// Writes samples, per-policy CDFs, the summary and any traces.
pub fn emit(
    cfg: &ExperimentConfig,
    res: &ExperimentResult,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let p = out_dir.join("samples.csv");
    write_samples(&p, &res.samples)?;
    written.push(p);
    for (policy, series) in compute_cdf(&res.samples) {
        let p = out_dir.join(format!("cdf_{policy}.csv"));
        write_cdf(&p, &series)?;
        written.push(p);
    }
    let p = out_dir.join("summary.txt");
    fs::write(&p, summary(cfg, res)).map_err(io_err(&p))?;
    written.push(p);
    for ((policy, trial), text) in &res.traces {
        let p = out_dir.join(format!("trace_{policy}_{trial}.log"));
        fs::write(&p, text).map_err(io_err(&p))?;
        written.push(p);
    }
    Ok(written)
}

/// Fails early if `dir` cannot be created or written.
pub fn check_writable(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(io_err(&probe))?;
    fs::remove_file(&probe).map_err(io_err(&probe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middlebox::CensorMode;
    use crate::netsim::{TraceLine, TRACE_HEADER};

    fn quick(trials: usize, file_size: usize) -> ExperimentConfig {
        ExperimentConfig {
            trials,
            file_size,
            ..ExperimentConfig::default()
        }
    }

    fn sample(policy: PolicyMode, trial: usize, t: Option<Micros>) -> LatencySample {
        LatencySample {
            policy,
            trial,
            success: t.is_some(),
            completion_us: t,
            first_byte_us: t.map(|x| x / 2),
            reason: if t.is_some() {
                None
            } else {
                Some(FetchFailure::Timeout)
            },
        }
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("1MB"), Some(1_000_000));
        assert_eq!(parse_size("10mb"), Some(10_000_000));
        assert_eq!(parse_size("64KB"), Some(64_000));
        assert_eq!(parse_size("1200"), Some(1200));
        assert_eq!(parse_size("12x"), None);
    }

    #[test]
    fn config_parses_profile_first() {
        let text = "censor_proxy_us 1000\nprofile oregon\npolicy quicstep\npolicy native\n\
                    file_size 10MB\ntrials 3 # inline comment\ncensor_mode sni-blocklist\nsni blocked.example\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.legs.censor_proxy, 1000);
        assert_eq!(cfg.legs.proxy_server, LegDelays::oregon().proxy_server);
        assert_eq!(cfg.policies, vec![PolicyMode::Native, PolicyMode::Quicstep]);
        assert_eq!(cfg.file_size, 10_000_000);
        assert_eq!(cfg.trials, 3);
        assert!(cfg.censor.has(CensorMode::SniBlocklist));
    }

    #[test]
    fn config_errors_name_the_line() {
        match ExperimentConfig::parse("trials 2\nbogus 1\n") {
            Err(HarnessError::Config { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ExperimentConfig::parse("trials 0"),
            Err(HarnessError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("loss 1.5"),
            Err(HarnessError::Invalid(_))
        ));
        assert!(ExperimentConfig::parse("policy warp").is_err());
    }

    #[test]
    fn oracle_unlimited_bandwidth() {
        let at = |size| {
            let cfg = quick(1, size);
            PolicyMode::ALL.map(|p| analytic_latency(p, &cfg))
        };
        // order follows PolicyMode::ALL: native, tunnel, quicstep
        assert_eq!(at(1200), [60_000, 240_000, 200_000]);
        assert_eq!(at(1_000_000), [320_000, 1_280_000, 460_000]);
        assert_eq!(at(10_000_000), [2_660_000, 10_640_000, 2_800_000]);
        let oregon = ExperimentConfig {
            legs: LegDelays::oregon(),
            ..quick(1, 1_000_000)
        };
        assert_eq!(analytic_latency(PolicyMode::Quicstep, &oregon), 564_000);
        assert_eq!(analytic_latency(PolicyMode::Native, &oregon), 320_000);
    }

    #[test]
    fn oracle_single_packet_serialization() {
        // 1247-byte packet at 1.25 MB/s takes 998 us per hop, two hops plus
        // 10 ms one way after the request lands at 50 ms
        assert_eq!(data_packet_size(), 1247);
        let cfg = ExperimentConfig {
            bandwidth: 1_250_000,
            ..quick(1, 1200)
        };
        assert_eq!(analytic_latency(PolicyMode::Native, &cfg), 61_996);
    }

    #[test]
    fn simulation_tracks_oracle_with_bandwidth() {
        let cfg = ExperimentConfig {
            bandwidth: 12_500_000,
            jitter_pct: 0.0,
            ..quick(1, 200_000)
        };
        let res = run_experiment(&cfg).unwrap();
        for p in PolicyMode::ALL {
            let sim = res.completion(p, 0).unwrap() as f64;
            let oracle = analytic_latency(p, &cfg) as f64;
            assert!(
                (sim - oracle).abs() <= 0.01 * oracle,
                "{p}: {sim} vs {oracle}"
            );
            assert!(sim >= oracle, "control packets only add time");
        }
    }

    #[test]
    fn cdf_definition() {
        let s: Vec<_> = [10_000, 20_000, 30_000]
            .iter()
            .enumerate()
            .map(|(i, t)| sample(PolicyMode::Native, i, Some(*t)))
            .collect();
        let cdf = &compute_cdf(&s)[&PolicyMode::Native];
        assert_eq!(
            cdf.points,
            vec![(10_000, 1.0 / 3.0), (20_000, 2.0 / 3.0), (30_000, 1.0)]
        );
    }

    #[test]
    fn cdf_all_failures_and_duplicates() {
        let fails: Vec<_> = (0..250)
            .map(|i| sample(PolicyMode::Native, i, None))
            .collect();
        let cdf = &compute_cdf(&fails)[&PolicyMode::Native];
        assert!(cdf.is_empty());
        assert_eq!(cdf.failures, 250);

        let dup: Vec<_> = [5, 5, 7, 5]
            .iter()
            .enumerate()
            .map(|(i, t)| sample(PolicyMode::Quicstep, i, Some(*t)))
            .collect();
        let cdf = &compute_cdf(&dup)[&PolicyMode::Quicstep];
        assert_eq!(cdf.points, vec![(5, 0.75), (7, 1.0)]);
    }

    #[test]
    fn nearest_rank_quantiles() {
        let s: Vec<_> = (1..=10)
            .map(|t| sample(PolicyMode::Native, t as usize, Some(t)))
            .collect();
        assert_eq!(quantile(&s, PolicyMode::Native, 0.5), Some(5));
        assert_eq!(quantile(&s, PolicyMode::Native, 0.9), Some(9));
        assert_eq!(quantile(&s, PolicyMode::Native, 1.0), Some(10));
        assert_eq!(quantile(&s, PolicyMode::Quicstep, 0.5), None);
    }

    #[test]
    fn accounting_and_dominance() {
        let cfg = quick(30, 100_000);
        let res = run_experiment(&cfg).unwrap();
        for p in PolicyMode::ALL {
            assert_eq!(res.for_policy(p).count(), 30);
            assert_eq!(res.successes(p), 30);
        }
        for t in 0..30 {
            let [n, f, q] = PolicyMode::ALL.map(|p| res.completion(p, t).unwrap());
            assert!(
                n <= q && q <= f,
                "trial {t}: native {n} quicstep {q} tunnel {f}"
            );
        }
    }

    #[test]
    fn failures_are_counted() {
        let cfg = ExperimentConfig {
            censor: CensorConfig::off().with_mode(CensorMode::DropAllHandshake),
            policies: vec![PolicyMode::Native],
            ..quick(4, 1000)
        };
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.successes(PolicyMode::Native), 0);
        assert!(res
            .samples
            .iter()
            .all(|s| s.reason == Some(FetchFailure::Timeout)));
        assert!(res.counters[&PolicyMode::Native].handshake > 0);
    }

    #[test]
    fn experiments_are_reproducible() {
        let cfg = ExperimentConfig {
            loss_rate: 0.01,
            ..quick(6, 30_000)
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.digests, b.digests);
    }

    #[test]
    fn emit_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            trace: true,
            ..quick(3, 5_000)
        };
        let res = run_experiment(&cfg).unwrap();
        let files = emit(&cfg, &res, dir.path()).unwrap();
        assert_eq!(files.len(), 1 + 3 + 1 + 9);

        let back = read_samples(&dir.path().join("samples.csv")).unwrap();
        assert_eq!(back, res.samples);

        let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        for p in PolicyMode::ALL {
            let med = quantile(&back, p, 0.5).unwrap();
            assert!(summary.contains(&format!("median_ms {}", ms(med))), "{p}");
        }

        let trace = fs::read_to_string(dir.path().join("trace_quicstep_0.log")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some(TRACE_HEADER));
        assert!(lines.all(|l| TraceLine::parse(l).is_ok()));

        let cdf = fs::read_to_string(dir.path().join("cdf_native.csv")).unwrap();
        assert!(cdf.starts_with("completion_us,fraction\n"));
    }

    #[test]
    fn unwritable_output_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(
            check_writable(&file.join("sub")),
            Err(HarnessError::Io { .. })
        ));
        assert!(check_writable(&dir.path().join("fresh")).is_ok());
    }
}
