//! Character error rate, emission latency, boundary accuracy, and the
//! ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{gen_corpus, CorpusConfig, Utterance};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Scalar};
use crate::seqlayout::{DeltaPolicy, LayoutKind};
use crate::streamdecode::{decode, DecodeConfig, DecodeEvent, DecodeOutput, EventKind};
use crate::tokens::{TokenId, VocabSpec};
use crate::train::{train, TrainConfig};

/// Frames of slack when matching predicted boundaries to the alignment.
pub const BOUNDARY_TOLERANCE: usize = 2;

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    /// Reference tokens with no emission to pair with.
    pub unmatched_refs: usize,
    /// Emissions beyond the reference length.
    pub unmatched_hyps: usize,
}

impl LatencyStats {
    pub fn from_delays(delays: &[i64], unmatched_refs: usize, unmatched_hyps: usize) -> Self {
        let mut sorted = delays.to_vec();
        sorted.sort_unstable();
        let rank = |q: f64| -> f64 {
            if sorted.is_empty() {
                return 0.0;
            }
            let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
            sorted[k - 1] as f64
        };
        let mean = if sorted.is_empty() { 0.0 } else { sorted.iter().sum::<i64>() as f64 / sorted.len() as f64 };
        Self { count: sorted.len(), mean, p50: rank(0.5), p90: rank(0.9), unmatched_refs, unmatched_hyps }
    }
}

/// Per-token emission delays, pairing the i-th emission with the i-th
/// reference token. Returns the delays and the unmatched counts.
pub fn emission_delays(events: &[DecodeEvent], utt: &Utterance) -> (Vec<i64>, usize, usize) {
    let emitted: Vec<usize> =
        events.iter().filter(|e| e.kind == EventKind::TextEmitted).map(|e| e.consumed_inputs).collect();
    let delays: Vec<i64> = emitted
        .iter()
        .zip(&utt.boundaries)
        .map(|(&consumed, &t)| consumed as i64 - (t as i64 + 1))
        .collect();
    let n = delays.len();
    (delays, utt.boundaries.len() - n, emitted.len() - n)
}

pub fn latency_stats(events: &[DecodeEvent], utt: &Utterance) -> LatencyStats {
    let (d, r, h) = emission_delays(events, utt);
    LatencyStats::from_delays(&d, r, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl BoundaryCounts {
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.matched as f64 / self.predicted as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        (self.reference > 0).then(|| self.matched as f64 / self.reference as f64)
    }

    fn add(&mut self, other: BoundaryCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.reference += other.reference;
    }
}

/// Greedy in-order matching of predicted to reference frames within
/// `tolerance`. Both inputs must be sorted.
pub fn match_boundaries(predicted: &[usize], reference: &[usize], tolerance: usize) -> BoundaryCounts {
    let (mut i, mut j, mut matched) = (0, 0, 0);
    while i < reference.len() && j < predicted.len() {
        let (r, p) = (reference[i], predicted[j]);
        if r.abs_diff(p) <= tolerance {
            matched += 1;
            i += 1;
            j += 1;
        } else if p < r {
            j += 1;
        } else {
            i += 1;
        }
    }
    BoundaryCounts { matched, predicted: predicted.len(), reference: reference.len() }
}

/// Original frame index each trigger fired on. TTI has no boundary token,
/// so its text emissions stand in as triggers.
pub fn predicted_boundaries(events: &[DecodeEvent], mode: LayoutKind) -> Option<Vec<usize>> {
    let kind = match mode {
        LayoutKind::Bti => EventKind::BoundaryTriggered,
        LayoutKind::Tti => EventKind::TextEmitted,
        LayoutKind::NonStreaming => return None,
    };
    let mut frames: Vec<usize> =
        events.iter().filter(|e| e.kind == kind).map(|e| e.consumed_inputs.saturating_sub(1)).collect();
    frames.dedup();
    Some(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub text: Vec<TokenId>,
    pub events: Vec<DecodeEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: LayoutKind,
    pub utterances: usize,
    pub ref_tokens: usize,
    pub edits: usize,
    pub cer: f64,
    pub latency: LatencyStats,
    pub boundaries: Option<BoundaryCounts>,
    pub text_cap_hits: usize,
    pub dropped_inputs: usize,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "mode\tutterances\tref_tokens\tedits\tcer\tlatency_mean\tlatency_p50\t\
        latency_p90\tunmatched_refs\tunmatched_hyps\tboundary_precision\tboundary_recall\ttext_cap_hits\tdropped_inputs";

    pub fn tsv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let b = self.boundaries.unwrap_or_default();
        let (p, r) = if self.boundaries.is_some() { (b.precision(), b.recall()) } else { (None, None) };
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            mode_name(self.mode),
            self.utterances,
            self.ref_tokens,
            self.edits,
            self.cer,
            self.latency.mean,
            self.latency.p50,
            self.latency.p90,
            self.latency.unmatched_refs,
            self.latency.unmatched_hyps,
            opt(p),
            opt(r),
            self.text_cap_hits,
            self.dropped_inputs,
        )
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}\n", Self::TSV_HEADER, self.tsv_row())
    }

    pub fn to_markdown(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let (p, r) = self.boundaries.map_or((None, None), |b| (b.precision(), b.recall()));
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation ({})\n", mode_name(self.mode));
        let _ = writeln!(s, "| metric | value |\n|---|---|");
        let _ = writeln!(s, "| utterances | {} |", self.utterances);
        let _ = writeln!(s, "| CER | {:.2}% ({} / {}) |", 100.0 * self.cer, self.edits, self.ref_tokens);
        let _ = writeln!(
            s,
            "| emission delay (frames) | mean {:.2}, p50 {}, p90 {} |",
            self.latency.mean, self.latency.p50, self.latency.p90
        );
        let _ = writeln!(
            s,
            "| unmatched (ref / hyp) | {} / {} |",
            self.latency.unmatched_refs, self.latency.unmatched_hyps
        );
        let _ = writeln!(s, "| boundary precision (±{BOUNDARY_TOLERANCE}) | {} |", pct(p));
        let _ = writeln!(s, "| boundary recall (±{BOUNDARY_TOLERANCE}) | {} |", pct(r));
        let _ = writeln!(s, "| text cap hits | {} |", self.text_cap_hits);
        s
    }
}

pub fn mode_name(mode: LayoutKind) -> &'static str {
    match mode {
        LayoutKind::Bti => "bti",
        LayoutKind::Tti => "tti",
        LayoutKind::NonStreaming => "nonstreaming",
    }
}

/// Decodes every utterance and aggregates corpus-level metrics.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    vocab: VocabSpec,
    utts: &[Utterance],
    config: &DecodeConfig,
) -> Result<(EvalReport, Vec<Hypothesis>)> {
    if params.config().vocab != vocab {
        return Err(Error::VocabMismatch(format!(
            "model vocabulary {:?} vs corpus {:?}",
            params.config().vocab,
            vocab
        )));
    }
    let mut hyps = Vec::with_capacity(utts.len());
    let mut delays = Vec::new();
    let (mut ref_tokens, mut edits, mut un_r, mut un_h, mut caps, mut dropped) = (0, 0, 0, 0, 0, 0);
    let mut bounds = BoundaryCounts::default();
    for utt in utts {
        let DecodeOutput { text, events, dropped_inputs } = decode(params, &utt.speech, config)?;
        ref_tokens += utt.text.len();
        edits += edit_distance(&utt.text, &text);
        let (d, r, h) = emission_delays(&events, utt);
        delays.extend(d);
        un_r += r;
        un_h += h;
        caps += events.iter().filter(|e| e.kind == EventKind::TextCapReached).count();
        dropped += dropped_inputs;
        if let Some(pred) = predicted_boundaries(&events, config.mode) {
            bounds.add(match_boundaries(&pred, &utt.boundaries, BOUNDARY_TOLERANCE));
        }
        hyps.push(Hypothesis { id: utt.id.clone(), text, events });
    }
    if ref_tokens == 0 {
        return Err(Error::EmptyReference);
    }
    let report = EvalReport {
        mode: config.mode,
        utterances: utts.len(),
        ref_tokens,
        edits,
        cer: edits as f64 / ref_tokens as f64,
        latency: LatencyStats::from_delays(&delays, un_r, un_h),
        boundaries: (config.mode != LayoutKind::NonStreaming).then_some(bounds),
        text_cap_hits: caps,
        dropped_inputs: dropped,
    };
    Ok((report, hyps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRightChunk,
    NoSpeed,
    NoShift,
    NoTimeMask,
    NoDedup,
    NoLabelSmoothing,
    Tti,
    NonStreaming,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoRightChunk,
        Variant::NoSpeed,
        Variant::NoShift,
        Variant::NoTimeMask,
        Variant::NoDedup,
        Variant::NoLabelSmoothing,
        Variant::Tti,
        Variant::NonStreaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "bti_full",
            Variant::NoRightChunk => "no_right_chunk",
            Variant::NoSpeed => "no_speed_perturb",
            Variant::NoShift => "no_trigger_shift",
            Variant::NoTimeMask => "no_time_mask",
            Variant::NoDedup => "no_random_dedup",
            Variant::NoLabelSmoothing => "no_label_smoothing",
            Variant::Tti => "tti",
            Variant::NonStreaming => "nonstreaming",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Derives the variant's training and decoding setup from the full BTI one.
    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let mut t = base.clone();
        t.layout = LayoutKind::Bti;
        t.decode.mode = LayoutKind::Bti;
        match self {
            Variant::Full => {}
            Variant::NoRightChunk => {
                t.delta_policy = DeltaPolicy::Fixed(0);
                t.decode.delta = 0;
            }
            Variant::NoSpeed => t.augment.speed_factors = vec![1.0],
            Variant::NoShift => t.augment.trigger_shift_p = 0.0,
            Variant::NoTimeMask => t.augment.time_mask_p = 0.0,
            Variant::NoDedup => t.augment.dedup_p = 0.0,
            Variant::NoLabelSmoothing => t.smoothing_epsilon = 0.0,
            Variant::Tti => {
                t.layout = LayoutKind::Tti;
                t.decode.mode = LayoutKind::Tti;
            }
            Variant::NonStreaming => {
                t.layout = LayoutKind::NonStreaming;
                t.decode.mode = LayoutKind::NonStreaming;
            }
        }
        t.mask = None;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl AblationConfig {
    pub fn desk(corpus: CorpusConfig) -> Self {
        let model = ModelConfig::desk(corpus.vocab);
        Self { corpus, model, train: TrainConfig::default(), seeds: vec![1], variants: Variant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub cers: Vec<f64>,
    pub latencies: Vec<f64>,
    pub median_cer: f64,
    pub median_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub const TSV_HEADER: &'static str = "variant\tseeds\tmedian_cer\tmedian_latency\tcers";

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::TSV_HEADER);
        for r in &self.rows {
            let cers: Vec<String> = r.cers.iter().map(|c| format!("{c:.6}")).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{}",
                r.variant.name(),
                r.seeds.len(),
                r.median_cer,
                r.median_latency,
                cers.join(",")
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | CER (%) | mean delay (frames) | seeds |\n|---|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {} |",
                r.variant.name(),
                100.0 * r.median_cer,
                r.median_latency,
                r.seeds.len()
            );
        }
        s
    }

    /// Writes `ablation.tsv` and `ablation.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (name, body) in [("ablation.tsv", self.to_tsv()), ("ablation.md", self.to_markdown())] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Trains and evaluates every variant for every seed on one generated corpus.
pub fn ablation_suite(config: &AblationConfig) -> Result<AblationTable> {
    if config.seeds.is_empty() || config.variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let corpus = gen_corpus(&config.corpus)?;
    let mut rows = Vec::with_capacity(config.variants.len());
    for &variant in &config.variants {
        let mut cers = Vec::new();
        let mut latencies = Vec::new();
        for &seed in &config.seeds {
            let mut tc = variant.configure(&config.train);
            tc.seed = seed;
            tc.dev_limit = Some(0);
            let outcome = train(&tc, &corpus, &config.model, None)?;
            let (report, _) = evaluate(&outcome.params, corpus.vocab(), &corpus.test, &tc.decode)?;
            cers.push(report.cer);
            latencies.push(report.latency.mean);
        }
        rows.push(AblationRow {
            variant,
            seeds: config.seeds.clone(),
            median_cer: median(&cers),
            median_latency: median(&latencies),
            cers,
            latencies,
        });
    }
    Ok(AblationTable { rows })
}
