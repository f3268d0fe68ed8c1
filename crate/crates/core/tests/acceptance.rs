//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 1 5 10`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamdec::corpus::{gen_corpus, Corpus, CorpusConfig, Utterance};
use streamdec::eval::{
    ablation_suite, cer, edit_distance, emission_delays, evaluate, AblationConfig, EvalReport, Variant,
};
use streamdec::model::{
    backward, forward, init_params, speech_step, text_step, ModelConfig, ModelParams, Mode, StreamCache,
};
use streamdec::seqlayout::{
    build_bti_layout, build_mask, DeltaPolicy, LayoutKind, LayoutSequence, LossKind, MaskVariant, TextPositionMode,
};
use streamdec::streamdecode::{decode_bti, DecodeConfig, StreamModel};
use streamdec::train::{
    sequence_loss, smoothed_target, train, LossWeights, LrSchedule, SmoothingSpec, TrainConfig,
};
use streamdec::{Error, Result, TokenId, VocabSpec};

const MASK_CASES: usize = 1000;
const MASK_BUDGET: Duration = Duration::from_secs(10);
const GRAD_SEEDS: u64 = 5;
const GRAD_PARAMS: usize = 60;
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-5;
/// Parameters whose analytic gradient is below this are not sampled: the
/// central difference has ~1e-10 absolute rounding error at `GRAD_H`.
const GRAD_FLOOR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const PARITY_CASES: usize = 100;
const PARITY_TOL: f32 = 1e-4;
const CAUSALITY_PAIRS: usize = 200;
const KL_CASES: usize = 100;
const KL_TOL: f64 = 1e-9;
const CER_TARGET: f64 = 0.05;
const NONSTREAMING_SLACK: f64 = 0.02;
const CONVERGENCE_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_SLACK: f64 = 0.002;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const NOISY_P_SUB: f64 = 0.15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------- fixtures

/// Random segmentation: `T <= max_t` frames, `L <= max_l` segments.
fn random_utterance(rng: &mut ChaCha8Rng, vocab: &VocabSpec, max_t: usize, max_l: usize) -> Utterance {
    let t = rng.gen_range(1..=max_t);
    let l = rng.gen_range(1..=max_l.min(t));
    let speech = (0..t).map(|_| rng.gen_range(vocab.speech_range())).collect();
    let mut boundaries = index::sample(rng, t - 1, l - 1).into_vec();
    boundaries.sort_unstable();
    boundaries.push(t - 1);
    let text = (0..l).map(|_| rng.gen_range(vocab.text_range())).collect();
    Utterance { id: "r".into(), speech, text, boundaries }
}

fn random_policy(rng: &mut ChaCha8Rng) -> DeltaPolicy {
    if rng.gen_bool(0.3) {
        DeltaPolicy::Dynamic
    } else {
        DeltaPolicy::Fixed(rng.gen_range(0..=4))
    }
}

fn small_model(vocab: VocabSpec, d: usize, heads: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: d, n_heads: heads, d_ff: 2 * d, vocab, max_positions: 128, dropout_p: 0.0 }
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

// ------------------------------------------------------- 1. mask oracle

/// Boundary stream indices and text bounds derived from first principles:
/// boundary `k` follows the `k` earlier boundaries and frames `0..=t_k`.
fn oracle_bounds(utt: &Utterance, policy: DeltaPolicy) -> (Vec<usize>, Vec<usize>) {
    let n = utt.speech.len() + utt.text.len();
    let b: Vec<usize> = utt.boundaries.iter().enumerate().map(|(k, &t)| t + 1 + k).collect();
    let r = (0..b.len())
        .map(|k| match policy {
            DeltaPolicy::Dynamic => {
                let next_len = if k + 1 < b.len() { utt.boundaries[k + 1] - utt.boundaries[k] } else { 0 };
                (b[k] + next_len).min(n - 1)
            }
            DeltaPolicy::Fixed(0) => b[k],
            DeltaPolicy::Fixed(d) => (b[k] + 1..n).filter(|j| !b.contains(j)).nth(d - 1).unwrap_or(n - 1),
        })
        .collect();
    (b, r)
}

fn oracle_visible(
    n: usize,
    b: &[usize],
    r: &[usize],
    variant: MaskVariant,
    row: usize,
    col: usize,
) -> bool {
    let col_speech = col < n;
    if row < n {
        return col_speech && (variant == MaskVariant::Global || col <= row);
    }
    let k = row - n;
    if !col_speech {
        return col - n <= k;
    }
    match variant {
        MaskVariant::Global => true,
        MaskVariant::Causal => col <= b[k],
        MaskVariant::RightChunk => col <= r[k],
    }
}

fn criterion_masks() -> Result<Outcome> {
    let start = Instant::now();
    let vocab = VocabSpec::new(8, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    for _ in 0..MASK_CASES {
        let utt = random_utterance(&mut rng, &vocab, 20, 5);
        let n = utt.speech.len() + utt.text.len();
        for policy in [DeltaPolicy::Fixed(rng.gen_range(0..=4)), DeltaPolicy::Dynamic] {
            let layout = build_bti_layout(&utt, policy, TextPositionMode::StreamPoint, &vocab)?;
            let (b, r) = oracle_bounds(&utt, policy);
            if layout.triggers != b || layout.text_bounds != r || layout.stream_len != n {
                mismatches += 1;
            }
            for variant in [MaskVariant::Global, MaskVariant::Causal, MaskVariant::RightChunk] {
                let mask = build_mask(&layout, variant)?;
                let size = layout.len();
                for i in 0..size {
                    for j in 0..size {
                        checked += 1;
                        if mask.get(i, j) != oracle_visible(n, &b, &r, variant, i, j) {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < MASK_BUDGET,
        format!("{MASK_CASES} utterances, {checked} mask bits, {mismatches} mismatches, {:.2}s (< 10s)", secs(took)),
    )
}

// ------------------------------------------------- 2. gradient exactness

fn loss_of(params: &ModelParams<f64>, layout: &LayoutSequence, spec: &SmoothingSpec) -> Result<f64> {
    let mask = build_mask(layout, MaskVariant::RightChunk)?;
    let out = forward(params, layout, &mask, Mode::Eval)?;
    Ok(sequence_loss(&out.logits, layout, spec, &LossWeights::default())?.loss)
}

fn criterion_gradients() -> Result<Outcome> {
    let start = Instant::now();
    let vocab = VocabSpec::new(10, 5)?;
    let spec = SmoothingSpec::speech(&vocab, 0.1)?;
    let mut worst = 0.0f64;
    let mut sampled = Vec::new();
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut params = init_params::<f64>(&small_model(vocab, 16, 2), seed)?;
        let utt = random_utterance(&mut rng, &vocab, 12, 4);
        let layout = build_bti_layout(&utt, DeltaPolicy::Dynamic, TextPositionMode::StreamPoint, &vocab)?;
        let mask = build_mask(&layout, MaskVariant::RightChunk)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(&params, &layout, &mask, Mode::Train(&mut drop_rng))?;
        let loss = sequence_loss(&out.logits, &layout, &spec, &LossWeights::default())?;
        let grads = backward(out.tape.expect("train mode records a tape"), &loss.grad)?;
        let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > GRAD_FLOOR).collect();
        let picks = index::sample(&mut rng, live.len(), GRAD_PARAMS.min(live.len()));
        for p in picks.iter().map(|i| live[i]) {
            let orig = params.data[p];
            params.data[p] = orig + GRAD_H;
            let up = loss_of(&params, &layout, &spec)?;
            params.data[p] = orig - GRAD_H;
            let down = loss_of(&params, &layout, &spec)?;
            params.data[p] = orig;
            let numeric = (up - down) / (2.0 * GRAD_H);
            let rel = (numeric - grads[p]).abs() / numeric.abs().max(grads[p].abs());
            worst = worst.max(rel);
        }
        sampled.push(picks.len());
    }
    let took = start.elapsed();
    let enough = sampled.iter().all(|&n| n >= 50);
    outcome(
        enough && worst < GRAD_TOL && took < GRAD_BUDGET,
        format!(
            "{GRAD_SEEDS} seeds, params per seed {sampled:?}, worst relative error {worst:.2e} (< 1e-5), {:.1}s",
            secs(took)
        ),
    )
}

// ------------------------------------------------ 3. streaming parity

/// Logits of every row computed incrementally: speech rows through the
/// speech cache, each text slot once the stream has reached its bound.
fn incremental_rows(params: &ModelParams<f32>, layout: &LayoutSequence) -> Result<Vec<Vec<f32>>> {
    let s = layout.stream_len;
    let mut rows = vec![Vec::new(); layout.len()];
    let mut speech = StreamCache::new(params);
    let mut text = StreamCache::new(params);
    let mut next_slot = 0;
    for i in 0..s {
        rows[i] = speech_step(params, &mut speech, layout.inputs[i], layout.positions[i])?;
        while next_slot < layout.num_slots() && layout.text_bounds[next_slot] == i {
            let row = s + next_slot;
            rows[row] = text_step(params, &speech, &mut text, layout.inputs[row], layout.positions[row], i + 1)?;
            next_slot += 1;
        }
    }
    Ok(rows)
}

fn criterion_parity() -> Result<Outcome> {
    let vocab = VocabSpec::new(16, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f32;
    let mut points = 0usize;
    for case in 0..PARITY_CASES {
        let params = init_params::<f32>(&small_model(vocab, 32, 4), case as u64)?;
        let utt = random_utterance(&mut rng, &vocab, 30, 6);
        let layout = build_bti_layout(&utt, random_policy(&mut rng), TextPositionMode::StreamPoint, &vocab)?;
        let full = forward(&params, &layout, &build_mask(&layout, MaskVariant::RightChunk)?, Mode::Eval)?;
        for (i, inc) in incremental_rows(&params, &layout)?.iter().enumerate() {
            if inc.len() != full.row(i).len() {
                worst = f32::INFINITY;
            }
            worst = worst.max(max_abs_diff(inc, full.row(i)));
            points += 1;
        }
    }
    outcome(
        worst < PARITY_TOL,
        format!("{PARITY_CASES} layouts, {points} emission points, max |diff| {worst:.2e} (< 1e-4)"),
    )
}

// ---------------------------------------------------------- 4. causality

fn criterion_causality() -> Result<Outcome> {
    let vocab = VocabSpec::new(16, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut changed = 0usize;
    let mut pairs = 0usize;
    while pairs < CAUSALITY_PAIRS {
        let variant = if pairs % 2 == 0 { MaskVariant::Causal } else { MaskVariant::RightChunk };
        let params = init_params::<f32>(&small_model(vocab, 32, 4), pairs as u64)?;
        let utt = random_utterance(&mut rng, &vocab, 20, 5);
        let layout = build_bti_layout(&utt, random_policy(&mut rng), TextPositionMode::StreamPoint, &vocab)?;
        let mask = build_mask(&layout, variant)?;
        let row = rng.gen_range(0..layout.len());
        let hidden: Vec<usize> = (0..layout.len()).filter(|&j| !mask.get(row, j)).collect();
        if hidden.is_empty() {
            continue;
        }
        let col = hidden[rng.gen_range(0..hidden.len())];
        let mut mutated = layout.clone();
        let old = mutated.inputs[col];
        mutated.inputs[col] = (old + rng.gen_range(1..vocab.total())) % vocab.total();
        let a = forward(&params, &layout, &mask, Mode::Eval)?;
        let b = forward(&params, &mutated, &mask, Mode::Eval)?;
        if a.row(row) != b.row(row) {
            changed += 1;
        }
        pairs += 1;
    }
    outcome(changed == 0, format!("{pairs} (position, mutation) pairs, {changed} rows changed (bitwise)"))
}

// ----------------------------------------------------- 5. KL loss oracle

/// Mean over speech rows of KL(q' || softmax(logits)), with q' = 1 - eps on the
/// target and eps / (K - 1) on each other speech id.
fn scalar_speech_kl(logits: &[f64], layout: &LayoutSequence, vocab: &VocabSpec, eps: f64) -> f64 {
    let v = vocab.total() as usize;
    let k = vocab.n_speech() as usize;
    let mut total = 0.0;
    let mut rows = 0;
    for i in 0..layout.len() {
        if layout.loss_kind[i] != LossKind::SpeechCE {
            continue;
        }
        let z = &logits[i * v..(i + 1) * v];
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = z.iter().map(|x| (x - m).exp()).sum();
        let target = layout.targets[i].unwrap() as usize;
        let mut kl = 0.0;
        for c in 0..k {
            let q = if c == target { 1.0 - eps } else { eps / (k - 1) as f64 };
            if q > 0.0 {
                let p = (z[c] - m).exp() / denom;
                kl += q * (q / p).ln();
            }
        }
        total += kl;
        rows += 1;
    }
    total / rows as f64
}

fn criterion_kl() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < KL_CASES {
        let vocab = VocabSpec::new(rng.gen_range(3..10), rng.gen_range(2..6))?;
        let utt = random_utterance(&mut rng, &vocab, 10, 3);
        let layout = build_bti_layout(&utt, random_policy(&mut rng), TextPositionMode::StreamPoint, &vocab)?;
        if !layout.loss_kind.contains(&LossKind::SpeechCE) {
            continue;
        }
        let eps = rng.gen_range(0.0..0.5);
        let v = vocab.total() as usize;
        let logits: Vec<f64> = (0..layout.len() * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let spec = SmoothingSpec::speech(&vocab, eps)?;
        let weights = LossWeights { speech: 1.0, boundary: 0.0, text: 0.0 };
        let got = sequence_loss(&logits, &layout, &spec, &weights)?.loss;
        worst = worst.max((got - scalar_speech_kl(&logits, &layout, &vocab, eps)).abs());
        cases += 1;
    }
    let q = smoothed_target(1, &SmoothingSpec::new(0.3, 0..3, 3)?)?;
    let example_ok = q.len() == 3 && q.iter().zip([0.15, 0.7, 0.15]).all(|(a, b)| (a - b).abs() < 1e-12);
    outcome(
        worst < KL_TOL && example_ok,
        format!("{KL_CASES} cases, max |diff| {worst:.2e} (< 1e-9); smoothed_target(3, 0.3) = {q:?}"),
    )
}

// ------------------------------------------- 6-8. training on the corpus

/// Training setup shared by the convergence and ablation criteria.
fn recipe() -> TrainConfig {
    let mut t = TrainConfig {
        epochs: 10,
        batch_size: 8,
        learning_rate: 5e-3,
        lr_schedule: LrSchedule::Cosine,
        dev_limit: Some(0),
        checkpoint_every_epoch: false,
        ..TrainConfig::default()
    };
    // Segments here span a few frames, not tens: shift triggers by one.
    t.augment.trigger_shift_max = 1;
    // Right chunk at inference: a fixed lookahead near the mean segment length.
    t.decode.delta = 2;
    t.decode.boundary_threshold = Some(0.5);
    t
}

fn train_and_eval(corpus: &Corpus, variant: Variant, seed: u64) -> Result<EvalReport> {
    let mut tc = variant.configure(&recipe());
    tc.seed = seed;
    let model = ModelConfig::desk(corpus.vocab());
    let out = train(&tc, corpus, &model, None)?;
    Ok(evaluate(&out.params, corpus.vocab(), &corpus.test, &tc.decode)?.0)
}

struct Convergence {
    bti: f64,
    nonstreaming: f64,
    took: Duration,
}

fn run_convergence(corpus: &Corpus) -> Result<Convergence> {
    let start = Instant::now();
    let bti = train_and_eval(corpus, Variant::Full, 1)?.cer;
    let nonstreaming = train_and_eval(corpus, Variant::NonStreaming, 1)?.cer;
    Ok(Convergence { bti, nonstreaming, took: start.elapsed() })
}

fn criterion_convergence(c: &Convergence) -> Result<Outcome> {
    outcome(
        c.bti < CER_TARGET && c.nonstreaming <= c.bti + NONSTREAMING_SLACK && c.took < CONVERGENCE_BUDGET,
        format!(
            "BTI CER {:.2}% (< 5%), non-streaming CER {:.2}% (<= BTI + 2), {:.0}s (< 900s)",
            pct(c.bti),
            pct(c.nonstreaming),
            secs(c.took)
        ),
    )
}

fn criterion_tti(corpus: &Corpus, bti: f64) -> Result<Outcome> {
    let tti = train_and_eval(corpus, Variant::Tti, 1)?.cer;
    outcome(tti >= bti, format!("TTI CER {:.2}% >= BTI CER {:.2}%", pct(tti), pct(bti)))
}

fn criterion_ablation() -> Result<Outcome> {
    let corpus = CorpusConfig { p_sub: NOISY_P_SUB, ..CorpusConfig::default() };
    let cfg = AblationConfig {
        model: ModelConfig::desk(corpus.vocab),
        corpus,
        train: recipe(),
        seeds: ABLATION_SEEDS.to_vec(),
        variants: vec![Variant::Full, Variant::NoRightChunk, Variant::NoLabelSmoothing],
    };
    let table = ablation_suite(&cfg)?;
    let med = |v: Variant| table.row(v).map(|r| r.median_cer).unwrap_or(f64::NAN);
    let (full, no_rc, no_ls) = (med(Variant::Full), med(Variant::NoRightChunk), med(Variant::NoLabelSmoothing));
    let cers = |v: Variant| {
        table.row(v).map(|r| r.cers.iter().map(|c| format!("{:.2}", pct(*c))).collect::<Vec<_>>().join("/"))
    };
    outcome(
        no_rc >= full - ABLATION_SLACK && no_ls >= full - ABLATION_SLACK,
        format!(
            "p_sub {NOISY_P_SUB}, median of 3 seeds: full {:.2}% [{}], no right chunk {:.2}% [{}], \
             no label smoothing {:.2}% [{}] (each >= full - 0.2)",
            pct(full),
            cers(Variant::Full).unwrap_or_default(),
            pct(no_rc),
            cers(Variant::NoRightChunk).unwrap_or_default(),
            pct(no_ls),
            cers(Variant::NoLabelSmoothing).unwrap_or_default(),
        ),
    )
}

// --------------------------------------------------------- 9. latency law

/// Fires BOUNDARY exactly after each reference segment end and spells the
/// reference text, so every emission delay comes from the lookahead alone.
struct PerfectTrigger {
    vocab: VocabSpec,
    ends: Vec<usize>,
    text: Vec<TokenId>,
}

impl StreamModel for PerfectTrigger {
    type Speech = usize;
    type Text = usize;

    fn vocab(&self) -> VocabSpec {
        self.vocab
    }
    fn max_positions(&self) -> usize {
        usize::MAX
    }
    fn new_speech(&self) -> usize {
        0
    }
    fn new_text(&self) -> usize {
        0
    }
    fn speech_step(&self, frames: &mut usize, token: TokenId, _: usize) -> Result<Vec<f64>> {
        let mut logits = vec![0.0; self.vocab.total() as usize];
        if token != self.vocab.boundary() {
            if self.ends.contains(frames) {
                logits[self.vocab.boundary() as usize] = 1.0;
            }
            *frames += 1;
        }
        Ok(logits)
    }
    fn text_step(&self, _: &usize, slot: &mut usize, _: TokenId, _: usize, _: usize) -> Result<Vec<f64>> {
        let mut logits = vec![0.0; self.vocab.total() as usize];
        if let Some(&y) = self.text.get(*slot) {
            logits[y as usize] = 1.0;
        }
        *slot += 1;
        Ok(logits)
    }
}

fn criterion_latency() -> Result<Outcome> {
    let corpus = gen_corpus(&CorpusConfig { n_train: 1, n_test: 100, p_sub: 0.0, ..CorpusConfig::default() })?;
    let mut pass = true;
    let mut means = Vec::new();
    for delta in [0usize, 2, 4] {
        let cfg = DecodeConfig { mode: LayoutKind::Bti, delta, dedup: false, ..DecodeConfig::default() };
        let mut interior = Vec::new();
        for utt in &corpus.test {
            let model = PerfectTrigger { vocab: corpus.vocab(), ends: utt.boundaries.clone(), text: utt.text.clone() };
            let out = decode_bti(&model, &utt.speech, &cfg)?;
            let (delays, missed, extra) = emission_delays(&out.events, utt);
            pass &= out.text == utt.text && missed == 0 && extra == 0;
            for (d, &t) in delays.iter().zip(&utt.boundaries) {
                if utt.num_frames() - 1 - t >= delta {
                    interior.push(*d);
                }
            }
        }
        let mean = interior.iter().sum::<i64>() as f64 / interior.len() as f64;
        pass &= !interior.is_empty() && interior.iter().all(|&d| d == delta as i64);
        means.push(format!("delta {delta}: mean {mean:.3} over {} tokens", interior.len()));
    }
    outcome(pass, format!("interior emission delays: {}", means.join(", ")))
}

// ------------------------------------------------------------ 10. CER oracle

fn brute_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => (brute_distance(ra, rb) + usize::from(x != y))
            .min(brute_distance(ra, b) + 1)
            .min(brute_distance(a, rb) + 1),
    }
}

fn criterion_cer() -> Result<Outcome> {
    let mut strings: Vec<Vec<u8>> = vec![vec![]];
    let mut level = vec![vec![]];
    for _ in 0..4 {
        level = level.iter().flat_map(|s: &Vec<u8>| (0..3u8).map(move |c| [s.as_slice(), &[c]].concat())).collect();
        strings.extend(level.iter().cloned());
    }
    let mut bad = 0usize;
    for r in &strings {
        for h in &strings {
            let d = brute_distance(r, h);
            let ok = edit_distance(r, h) == d
                && match cer(r, h) {
                    Ok(c) => !r.is_empty() && c == d as f64 / r.len() as f64,
                    Err(Error::EmptyReference) => r.is_empty(),
                    Err(_) => false,
                };
            bad += usize::from(!ok);
        }
    }
    let n = strings.len();
    outcome(bad == 0, format!("{n} strings, {} pairs, {bad} mismatches", n * n))
}

// ------------------------------------------------------- 11. reproducibility

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((path.file_name().unwrap().to_string_lossy().into_owned(), bytes));
    }
    files.sort();
    Ok(files)
}

fn criterion_reproducibility() -> Result<Outcome> {
    let corpus = gen_corpus(&CorpusConfig { n_train: 200, n_test: 20, ..CorpusConfig::default() })?;
    let model = ModelConfig::desk(corpus.vocab());
    let tmp = tempfile::tempdir().map_err(|e| Error::io(Path::new("tempdir"), e))?;
    let mut runs = Vec::new();
    for (name, workers) in [("a", 1), ("b", 1), ("c", 2)] {
        let tc = TrainConfig { epochs: 2, workers, checkpoint_every_epoch: true, ..recipe() };
        let dir = tmp.path().join(name);
        let out = train(&tc, &corpus, &model, Some(&dir))?;
        let (report, hyps) = evaluate(&out.params, corpus.vocab(), &corpus.test, &tc.decode)?;
        let hyps = serde_json::to_string(&hyps).expect("hypotheses serialize");
        runs.push((dir_bytes(&dir)?, report.to_tsv(), report.to_markdown(), hyps));
    }
    let files = runs[0].0.len();
    let same = runs.iter().all(|r| *r == runs[0]);
    outcome(
        same && files >= 4,
        format!("3 runs (workers 1, 1, 2): {files} checkpoint/metrics files and eval reports byte-identical: {same}"),
    )
}

// ------------------------------------------------------------------ driver

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn report(n: usize, name: &str, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("{} [{n:>2}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut ok = true;

    if want(1) {
        ok &= report(1, "mask oracle equivalence", criterion_masks());
    }
    if want(2) {
        ok &= report(2, "gradient exactness", criterion_gradients());
    }
    if want(3) {
        ok &= report(3, "streaming/batch parity", criterion_parity());
    }
    if want(4) {
        ok &= report(4, "causality", criterion_causality());
    }
    if want(5) {
        ok &= report(5, "smoothed KL loss", criterion_kl());
    }
    if want(6) || want(7) {
        match gen_corpus(&CorpusConfig::default()) {
            Ok(corpus) => {
                let conv = run_convergence(&corpus);
                let bti = conv.as_ref().map(|c| c.bti).ok();
                if want(6) {
                    ok &= report(6, "synthetic convergence", conv.and_then(|c| criterion_convergence(&c)));
                }
                if want(7) {
                    let res = match bti {
                        Some(b) => criterion_tti(&corpus, b),
                        None => Err(Error::Config("BTI run failed".into())),
                    };
                    ok &= report(7, "TTI vs BTI", res);
                }
            }
            Err(e) => {
                ok &= report(6, "synthetic convergence", Err(e));
            }
        }
    }
    if want(8) {
        ok &= report(8, "ablation directions", criterion_ablation());
    }
    if want(9) {
        ok &= report(9, "latency law", criterion_latency());
    }
    if want(10) {
        ok &= report(10, "CER oracle", criterion_cer());
    }
    if want(11) {
        ok &= report(11, "reproducibility", criterion_reproducibility());
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
