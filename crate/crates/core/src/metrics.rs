//! Entropy, ratios, rank histograms and the benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::container::{deflate, pack_ranks, pack_with_level, unpack, ContainerError, DEFAULT_LEVEL};
use crate::ingest::CorpusSplit;
use crate::model::ModelParams;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty stream")]
    EmptyStream,
    #[error("probability {0} outside (0, 1]")]
    Domain(f64),
    #[error("original size is zero")]
    ZeroOriginal,
    #[error("benchmark round trip lost data in group {0}")]
    RoundTripMismatch(usize),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

/// Plug-in Shannon entropy of the stream's symbol histogram, in bits.
pub fn empirical_entropy<S: Copy + Into<u32>>(stream: &[S]) -> Result<f64, MetricsError> {
    if stream.is_empty() {
        return Err(MetricsError::EmptyStream);
    }
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for &s in stream {
        *counts.entry(s.into()).or_default() += 1;
    }
    let n = stream.len() as f64;
    let h: f64 = counts.values().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum();
    Ok(h.max(0.0))
}

/// Ideal code length `−log₂ p` in bits.
pub fn coding_length(p: f64) -> Result<f64, MetricsError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::Domain(p));
    }
    Ok(-p.log2())
}

pub fn compression_ratio(compressed: usize, original: usize) -> Result<f64, MetricsError> {
    if original == 0 {
        return Err(MetricsError::ZeroOriginal);
    }
    Ok(compressed as f64 / original as f64)
}

/// `(rank, share)` pairs, share descending then rank ascending; shares sum to 1.
pub fn rank_histogram(ranks: &[u16]) -> Vec<(u16, f64)> {
    let mut counts: BTreeMap<u16, u64> = BTreeMap::new();
    for &r in ranks {
        *counts.entry(r).or_default() += 1;
    }
    let n = ranks.len() as f64;
    let mut rows: Vec<(u16, u64)> = counts.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    rows.into_iter().map(|(r, c)| (r, c as f64 / n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    DeflateOnly,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub level: u32,
    /// Timed repetitions of pack and unpack per group; the median is reported.
    pub timing_runs: usize,
    pub workers: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { level: DEFAULT_LEVEL, timing_runs: 5, workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group_no: usize,
    pub n_packets: usize,
    pub n_bytes: usize,
    /// Full container size.
    pub size_model: usize,
    /// Deflate payload inside the container.
    pub payload_model: usize,
    pub size_baseline: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub model_fingerprint: String,
    pub model_preset: String,
    pub baseline: Baseline,
    pub deflate_level: u32,
    pub n_packets: usize,
    pub n_bytes: usize,
    pub byte_entropy_bits: f64,
    pub rank_entropy_bits: f64,
    pub ratio_model: f64,
    pub ratio_model_payload: f64,
    pub ratio_deflate_baseline: f64,
    /// Rank stream deflated with fixed two-byte ranks instead of escapes.
    pub ratio_model_two_byte: f64,
    pub rank_zero_share: f64,
    pub rank_histogram: Vec<(u16, f64)>,
    pub per_group: Vec<GroupRow>,
    #[serde(skip)]
    pub compress_seconds: f64,
    #[serde(skip)]
    pub decompress_seconds: f64,
    #[serde(skip)]
    pub timing_runs: usize,
    #[serde(skip)]
    pub workers: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Compresses every test group with the model pipeline and with plain
/// Deflate, checks each container decodes back, and collects the report.
pub fn run_benchmark(
    split: &CorpusSplit,
    params: &ModelParams,
    baseline: Baseline,
    opts: &BenchOptions,
) -> Result<EvalReport, MetricsError> {
    let groups = split.groups();
    if groups.is_empty() {
        return Err(MetricsError::EmptyStream);
    }
    let runs = opts.timing_runs.max(1);
    let mut all_ranks: Vec<u16> = Vec::new();
    let mut all_bytes: Vec<u8> = Vec::new();
    let mut two_byte_size = 0;
    let mut rows = Vec::with_capacity(groups.len());
    let (mut t_pack, mut t_unpack) = (0.0, 0.0);

    for (g, group) in groups.iter().enumerate() {
        let mut pack_times = Vec::with_capacity(runs);
        let mut result = None;
        for _ in 0..runs {
            let t = Instant::now();
            let r = pack_with_level(group, params, opts.level)?;
            pack_times.push(t.elapsed().as_secs_f64());
            result.get_or_insert(r);
        }
        let (container, ranks) = result.expect("at least one run");

        let mut unpack_times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            let back = unpack(&container, params)?;
            unpack_times.push(t.elapsed().as_secs_f64());
            if back.packets() != group.packets() {
                return Err(MetricsError::RoundTripMismatch(g + 1));
            }
        }
        t_pack += median(pack_times);
        t_unpack += median(unpack_times);

        let raw = group.concatenated();
        let wide: Vec<u8> = ranks.iter().flatten().flat_map(|r| r.to_le_bytes()).collect();
        two_byte_size += deflate(&wide, opts.level).len();
        // the container's payload must be reproducible from the ranks alone
        debug_assert_eq!(
            pack_ranks(container.lengths.clone(), &ranks, container.fingerprint, opts.level)?.payload,
            container.payload
        );
        rows.push(GroupRow {
            group_no: g + 1,
            n_packets: group.len(),
            n_bytes: raw.len(),
            size_model: container.total_len(),
            payload_model: container.payload.len(),
            size_baseline: match baseline {
                Baseline::DeflateOnly => deflate(&raw, opts.level).len(),
            },
        });
        all_ranks.extend(ranks.into_iter().flatten());
        all_bytes.extend(raw);
    }

    let n_bytes = all_bytes.len();
    let total = |f: fn(&GroupRow) -> usize| rows.iter().map(f).sum::<usize>();
    let hist = rank_histogram(&all_ranks);
    Ok(EvalReport {
        model_fingerprint: format!("{:016x}", params.fingerprint()),
        model_preset: params.config.preset_name.clone(),
        baseline,
        deflate_level: opts.level,
        n_packets: split.test.len(),
        n_bytes,
        byte_entropy_bits: empirical_entropy(&all_bytes)?,
        rank_entropy_bits: empirical_entropy(&all_ranks)?,
        ratio_model: compression_ratio(total(|r| r.size_model), n_bytes)?,
        ratio_model_payload: compression_ratio(total(|r| r.payload_model), n_bytes)?,
        ratio_deflate_baseline: compression_ratio(total(|r| r.size_baseline), n_bytes)?,
        ratio_model_two_byte: compression_ratio(two_byte_size, n_bytes)?,
        rank_zero_share: hist.iter().find(|(r, _)| *r == 0).map_or(0.0, |&(_, s)| s),
        rank_histogram: hist,
        per_group: rows,
        compress_seconds: t_pack,
        decompress_seconds: t_unpack,
        timing_runs: runs,
        workers: opts.workers,
    })
}

/// `name<TAB>value` records followed by the group table.
pub fn report_tsv(report: &EvalReport) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}\t{v}");
    };
    kv("model_fingerprint", report.model_fingerprint.clone());
    kv("model_preset", report.model_preset.clone());
    kv("baseline", "deflate-only".into());
    kv("deflate_level", report.deflate_level.to_string());
    kv("n_packets", report.n_packets.to_string());
    kv("n_bytes", report.n_bytes.to_string());
    kv("byte_entropy_bits", format!("{:.6}", report.byte_entropy_bits));
    kv("rank_entropy_bits", format!("{:.6}", report.rank_entropy_bits));
    kv("ratio_model", format!("{:.6}", report.ratio_model));
    kv("ratio_model_payload", format!("{:.6}", report.ratio_model_payload));
    kv("ratio_deflate_baseline", format!("{:.6}", report.ratio_deflate_baseline));
    kv("ratio_model_two_byte", format!("{:.6}", report.ratio_model_two_byte));
    kv("rank_zero_share", format!("{:.6}", report.rank_zero_share));
    for (r, share) in report.rank_histogram.iter().take(10) {
        kv(&format!("rank_share_{r}"), format!("{share:.6}"));
    }
    s.push_str("group\tn_bytes\tsize_model\tsize_baseline\n");
    for g in &report.per_group {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", g.group_no, g.n_bytes, g.size_model, g.size_baseline);
    }
    s
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

/// Wall-clock figures, kept apart so the other report files stay reproducible.
pub fn timing_tsv(report: &EvalReport) -> String {
    format!(
        "compress_seconds\t{:.6}\ndecompress_seconds\t{:.6}\ntiming_runs\t{}\nworkers\t{}\n",
        report.compress_seconds, report.decompress_seconds, report.timing_runs, report.workers
    )
}

/// Human-readable summary with the top ten ranks as percentages.
pub fn summary_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>6} {:>10} {:>12} {:>12}", "group", "n_bytes", "size_model", "size_zlib");
    for g in &report.per_group {
        let _ = writeln!(s, "{:>6} {:>10} {:>12} {:>12}", g.group_no, g.n_bytes, g.size_model, g.size_baseline);
    }
    let _ = writeln!(
        s,
        "ratio model {:.4} (payload {:.4})  zlib {:.4}",
        report.ratio_model, report.ratio_model_payload, report.ratio_deflate_baseline
    );
    let _ = writeln!(s, "entropy bytes {:.4} bits  ranks {:.4} bits", report.byte_entropy_bits, report.rank_entropy_bits);
    let top: Vec<String> =
        report.rank_histogram.iter().take(10).map(|(r, p)| format!("{r}:{:.2}%", p * 100.0)).collect();
    let _ = writeln!(s, "top ranks {}", top.join(" "));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::PacketCorpus;
    use crate::model::ModelConfig;

    #[test]
    fn entropy_examples() {
        assert_eq!(empirical_entropy(&[7u8; 100]).unwrap(), 0.0);
        let all: Vec<u8> = (0..=255).collect();
        assert!((empirical_entropy(&all).unwrap() - 8.0).abs() < 1e-12);
        assert!((empirical_entropy(&[0u16, 1]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(empirical_entropy::<u8>(&[]), Err(MetricsError::EmptyStream)));
    }

    #[test]
    fn coding_length_examples() {
        assert_eq!(coding_length(0.5).unwrap(), 1.0);
        assert_eq!(coding_length(1.0).unwrap(), 0.0);
        assert!((coding_length(1.0 / 258.0).unwrap() - 258f64.log2()).abs() < 1e-12);
        assert!((coding_length(1.0 / 258.0).unwrap() - 8.0112).abs() < 1e-4);
        assert!(matches!(coding_length(0.0), Err(MetricsError::Domain(_))));
        assert!(coding_length(-0.1).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert!((compression_ratio(119_953, 259_027).unwrap() - 0.4631).abs() < 5e-5);
        assert_eq!(compression_ratio(10, 10).unwrap(), 1.0);
        assert_eq!(compression_ratio(0, 10).unwrap(), 0.0);
        assert!(matches!(compression_ratio(1, 0), Err(MetricsError::ZeroOriginal)));
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(rank_histogram(&[0, 0, 0]), vec![(0, 1.0)]);
        assert_eq!(rank_histogram(&[0, 0, 1, 2]), vec![(0, 0.5), (1, 0.25), (2, 0.25)]);
        assert_eq!(rank_histogram(&[5, 3]), vec![(3, 0.5), (5, 0.5)]);
    }

    fn bench_fixture() -> (CorpusSplit, ModelParams) {
        let packets: Vec<Vec<u8>> = (0..12).map(|i| (0..20 + i).map(|b| (b * 7 + i) as u8).collect()).collect();
        let test = PacketCorpus::new(packets, "b").unwrap();
        let params = ModelParams::init(&ModelConfig::custom(2, 1, 8, Some(16)).with_context(32), 1).unwrap();
        (CorpusSplit::test_only(test, 5), params)
    }

    #[test]
    fn benchmark_is_consistent() {
        let (split, params) = bench_fixture();
        let opts = BenchOptions { timing_runs: 1, ..Default::default() };
        let r = run_benchmark(&split, &params, Baseline::DeflateOnly, &opts).unwrap();
        assert_eq!(r.per_group.len(), 3);
        assert_eq!(r.per_group.iter().map(|g| g.n_bytes).sum::<usize>(), r.n_bytes);
        let payload: usize = r.per_group.iter().map(|g| g.payload_model).sum();
        assert!((r.ratio_model_payload - payload as f64 / r.n_bytes as f64).abs() < 1e-12);
        assert!((r.rank_histogram.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.ratio_model > 0.0 && r.ratio_deflate_baseline > 0.0);
        assert!((0.0..=8.0).contains(&r.byte_entropy_bits));

        let again = run_benchmark(&split, &params, Baseline::DeflateOnly, &opts).unwrap();
        assert_eq!(report_tsv(&r), report_tsv(&again));
        assert_eq!(report_json(&r), report_json(&again));
        let tsv = report_tsv(&r);
        assert!(tsv.lines().any(|l| l.starts_with("ratio_model\t")));
        assert!(tsv.lines().any(|l| l == format!("1\t{}\t{}\t{}", r.per_group[0].n_bytes, r.per_group[0].size_model, r.per_group[0].size_baseline)));
        assert!(!report_json(&r).contains("seconds"));
    }
}
