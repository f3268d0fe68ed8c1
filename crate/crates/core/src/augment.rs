//! Training-time augmentation on aligned utterances, plus the global
//! de-duplication applied before decoding.
//!
//! Run-based operations work on runs inside a segment: a run of equal
//! tokens that straddles a boundary is treated as two runs, so every
//! segment keeps at least one frame and boundaries stay strictly increasing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::tokens::{TokenId, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    pub trigger_shift_p: f64,
    pub trigger_shift_max: usize,
    pub time_mask_p: f64,
    pub dedup_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            speed_factors: vec![0.9, 1.0, 1.1],
            trigger_shift_p: 0.3,
            trigger_shift_max: 4,
            time_mask_p: 0.3,
            dedup_p: 0.5,
        }
    }
}

impl AugmentConfig {
    /// All augmentation switched off.
    pub fn identity() -> Self {
        Self { speed_factors: vec![1.0], trigger_shift_p: 0.0, trigger_shift_max: 1, time_mask_p: 0.0, dedup_p: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("trigger_shift_p", self.trigger_shift_p),
            ("time_mask_p", self.time_mask_p),
            ("dedup_p", self.dedup_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.trigger_shift_max < 1 {
            return Err(Error::Config("trigger_shift_max must be at least 1".into()));
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config("speed_factors must be a non-empty set of positive rates".into()));
        }
        Ok(())
    }

    /// Speed, trigger shift, then random de-duplication. Time masking runs
    /// later, on the laid-out inputs.
    pub fn apply<R: Rng>(&self, utt: &Utterance, rng: &mut R) -> Utterance {
        let factor = self.speed_factors[rng.gen_range(0..self.speed_factors.len())];
        let out = speed_perturb(utt, factor);
        let out = trigger_shift(&out, rng, self.trigger_shift_p, self.trigger_shift_max);
        random_dedup(&out, rng, self.dedup_p)
    }
}

/// Runs of equal tokens within one segment, as `(start, len)`.
fn segment_runs(speech: &[TokenId], seg: std::ops::Range<usize>) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = seg.start;
    for i in seg.start + 1..=seg.end {
        if i == seg.end || speech[i] != speech[start] {
            runs.push((start, i - start));
            start = i;
        }
    }
    runs
}

/// Stretches every run of length `r` to `max(1, round(r / factor))`.
pub fn speed_perturb(utt: &Utterance, factor: f64) -> Utterance {
    let mut speech = Vec::with_capacity(utt.speech.len());
    let mut boundaries = Vec::with_capacity(utt.boundaries.len());
    for seg in utt.segments() {
        for (start, len) in segment_runs(&utt.speech, seg) {
            let stretched = ((len as f64 / factor).round() as usize).max(1);
            speech.extend(std::iter::repeat(utt.speech[start]).take(stretched));
        }
        boundaries.push(speech.len() - 1);
    }
    Utterance { id: utt.id.clone(), speech, text: utt.text.clone(), boundaries }
}

/// Moves each non-final boundary by the given signed offset (if any), left to
/// right, clamping so boundaries stay strictly increasing inside `[0, T-1]`.
pub fn apply_trigger_shifts(utt: &Utterance, shifts: &[Option<i64>]) -> Utterance {
    let l = utt.boundaries.len();
    let mut out = utt.boundaries.clone();
    for i in 0..l.saturating_sub(1) {
        let Some(delta) = shifts.get(i).copied().flatten() else { continue };
        let lo = if i == 0 { 0 } else { out[i - 1] as i64 + 1 };
        let hi = utt.boundaries[i + 1] as i64 - 1;
        out[i] = (utt.boundaries[i] as i64 + delta).clamp(lo, hi) as usize;
    }
    Utterance { id: utt.id.clone(), speech: utt.speech.clone(), text: utt.text.clone(), boundaries: out }
}

/// With probability `p` per non-final boundary, shifts it by a uniform
/// offset in `±{1..max_shift}`. The final boundary stays at `T-1`.
pub fn trigger_shift<R: Rng>(utt: &Utterance, rng: &mut R, p: f64, max_shift: usize) -> Utterance {
    let l = utt.boundaries.len();
    let shifts: Vec<Option<i64>> = (0..l.saturating_sub(1))
        .map(|_| {
            if rng.gen_bool(p) {
                let mag = rng.gen_range(1..=max_shift.max(1)) as i64;
                Some(if rng.gen_bool(0.5) { mag } else { -mag })
            } else {
                None
            }
        })
        .collect();
    apply_trigger_shifts(utt, &shifts)
}

/// Collapses each in-segment run to its first frame with probability `p`.
pub fn random_dedup<R: Rng>(utt: &Utterance, rng: &mut R, p: f64) -> Utterance {
    let mut keep = vec![true; utt.speech.len()];
    for seg in utt.segments() {
        for (start, len) in segment_runs(&utt.speech, seg) {
            if len > 1 && rng.gen_bool(p) {
                keep[start + 1..start + len].iter_mut().for_each(|k| *k = false);
            }
        }
    }
    let speech = utt.speech.iter().zip(&keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect();
    // new_index(t) = (kept frames with original index <= t) - 1
    let mut kept_through = Vec::with_capacity(keep.len());
    let mut n = 0usize;
    for &k in &keep {
        n += k as usize;
        kept_through.push(n);
    }
    let boundaries = utt.boundaries.iter().map(|&t| kept_through[t] - 1).collect();
    Utterance { id: utt.id.clone(), speech, text: utt.text.clone(), boundaries }
}

/// Index bookkeeping for [`global_dedup`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexRemap {
    /// Original index -> index of the kept frame of its run.
    pub to_new: Vec<usize>,
    /// Kept index -> original index of that frame.
    pub to_orig: Vec<usize>,
}

/// Collapses every run of equal tokens to its first frame.
pub fn global_dedup(speech: &[TokenId]) -> (Vec<TokenId>, IndexRemap) {
    let mut out = Vec::new();
    let mut remap = IndexRemap { to_new: Vec::with_capacity(speech.len()), to_orig: Vec::new() };
    for (i, &s) in speech.iter().enumerate() {
        if out.last() != Some(&s) {
            out.push(s);
            remap.to_orig.push(i);
        }
        remap.to_new.push(out.len() - 1);
    }
    (out, remap)
}

/// Replaces each non-BOUNDARY input by PAD with probability `p`.
pub fn time_mask<R: Rng>(inputs: &[TokenId], vocab: &VocabSpec, rng: &mut R, p: f64) -> Vec<TokenId> {
    inputs
        .iter()
        .map(|&t| if t != vocab.boundary() && rng.gen_bool(p) { vocab.pad() } else { t })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_lexicon, synth_utterance};
    use crate::seed::rng_for;
    use proptest::prelude::{prop_assert_eq, proptest, Strategy};

    fn utt(speech: &[u32], text: &[u32], boundaries: &[usize]) -> Utterance {
        Utterance { id: "t".into(), speech: speech.to_vec(), text: text.to_vec(), boundaries: boundaries.to_vec() }
    }

    /// Independent re-derivation of speed perturbation: plain run-length
    /// encoding of each segment, then per-run rescaling.
    fn speed_oracle(u: &Utterance, factor: f64) -> (Vec<u32>, Vec<usize>) {
        let mut speech = Vec::new();
        let mut bounds = Vec::new();
        let mut start = 0;
        for &end in &u.boundaries {
            let seg = &u.speech[start..=end];
            let mut rle: Vec<(u32, usize)> = Vec::new();
            for &s in seg {
                match rle.last_mut() {
                    Some((v, n)) if *v == s => *n += 1,
                    _ => rle.push((s, 1)),
                }
            }
            for (v, n) in rle {
                let m = ((n as f64 / factor).round() as usize).max(1);
                speech.extend(vec![v; m]);
            }
            bounds.push(speech.len() - 1);
            start = end + 1;
        }
        (speech, bounds)
    }

    fn random_utts(n: usize) -> Vec<Utterance> {
        let v = VocabSpec::new(6, 5).unwrap();
        let lex = gen_lexicon(1, v);
        let mut rng = rng_for(5, &[]);
        (0..n)
            .map(|i| {
                let len = rng.gen_range(1..6);
                let text: Vec<u32> = (0..len).map(|_| 6 + rng.gen_range(0..5)).collect();
                synth_utterance(&lex, i as u64, "r", &text, 0.2).unwrap()
            })
            .collect()
    }

    #[test]
    fn speed_identity_at_one() {
        for u in random_utts(50) {
            assert_eq!(speed_perturb(&u, 1.0), u);
        }
    }

    #[test]
    fn speed_matches_oracle() {
        let u = utt(&[0, 0, 0, 1], &[10], &[3]);
        let out = speed_perturb(&u, 0.9);
        assert_eq!((out.speech.clone(), out.boundaries.clone()), speed_oracle(&u, 0.9));
        assert_eq!(out.speech, vec![0, 0, 0, 1]);
        for f in [0.5, 0.9, 1.1, 1.7, 2.0] {
            for u in random_utts(30) {
                let out = speed_perturb(&u, f);
                assert_eq!((out.speech.clone(), out.boundaries.clone()), speed_oracle(&u, f));
                out.check_structure().unwrap();
            }
        }
    }

    #[test]
    fn speed_floor_keeps_singletons() {
        let u = utt(&[0, 1, 2, 3, 4], &[10, 11], &[1, 4]);
        assert_eq!(speed_perturb(&u, 2.0), u);
    }

    #[test]
    fn trigger_shift_no_op_at_zero() {
        let mut rng = rng_for(1, &[]);
        for u in random_utts(30) {
            assert_eq!(trigger_shift(&u, &mut rng, 0.0, 4), u);
        }
    }

    #[test]
    fn trigger_shift_clamps_before_next_boundary() {
        let u = utt(&[0; 10], &[10, 11, 12], &[2, 5, 9]);
        let out = apply_trigger_shifts(&u, &[Some(4), None]);
        assert_eq!(out.boundaries, vec![4, 5, 9]);
        let out = apply_trigger_shifts(&u, &[Some(-4), Some(4)]);
        assert_eq!(out.boundaries, vec![0, 8, 9]);
    }

    #[test]
    fn trigger_shift_rate() {
        let u = utt(&(0..200).collect::<Vec<_>>(), &vec![10; 20], &(0..20).map(|i| i * 10 + 9).collect::<Vec<_>>());
        let mut rng = rng_for(2, &[]);
        let (mut moved, mut total) = (0usize, 0usize);
        for _ in 0..10_000 / 19 + 1 {
            let out = trigger_shift(&u, &mut rng, 0.3, 4);
            moved += out.boundaries.iter().zip(&u.boundaries).take(19).filter(|(a, b)| a != b).count();
            total += 19;
            assert_eq!(*out.boundaries.last().unwrap(), 199);
        }
        let frac = moved as f64 / total as f64;
        assert!((frac - 0.3).abs() < 0.02, "shift fraction {frac}");
    }

    #[test]
    fn dedup_hand_example() {
        let u = utt(&[0, 0, 1, 1, 2], &[10, 11], &[1, 4]);
        let out = random_dedup(&u, &mut rng_for(0, &[]), 1.0);
        assert_eq!(out.speech, vec![0, 1, 2]);
        assert_eq!(out.boundaries, vec![0, 2]);
        assert_eq!(random_dedup(&u, &mut rng_for(0, &[]), 0.0), u);
    }

    #[test]
    fn dedup_without_runs_is_identity() {
        let u = utt(&[0, 1, 2, 3], &[10, 11], &[1, 3]);
        for p in [0.0, 0.5, 1.0] {
            assert_eq!(random_dedup(&u, &mut rng_for(3, &[]), p), u);
        }
    }

    #[test]
    fn dedup_keeps_runs_split_at_boundaries() {
        let u = utt(&[0, 0, 0, 0], &[10, 11], &[1, 3]);
        let out = random_dedup(&u, &mut rng_for(0, &[]), 1.0);
        assert_eq!(out.speech, vec![0, 0]);
        assert_eq!(out.boundaries, vec![0, 1]);
    }

    #[test]
    fn global_dedup_examples() {
        assert_eq!(global_dedup(&[5, 5, 5]).0, vec![5]);
        let (d, remap) = global_dedup(&[1, 2, 1, 1, 2]);
        assert_eq!(d, vec![1, 2, 1, 2]);
        assert_eq!(remap.to_new, vec![0, 1, 2, 2, 3]);
        assert_eq!(remap.to_orig, vec![0, 1, 2, 4]);
        assert_eq!(global_dedup(&[]).0, Vec::<u32>::new());
    }

    #[test]
    fn time_mask_limits() {
        let v = VocabSpec::new(4, 3).unwrap();
        let b = v.boundary();
        let inputs = vec![0, 1, b, 4, 2, b, v.sos_text(), 5];
        let mut rng = rng_for(0, &[]);
        assert_eq!(time_mask(&inputs, &v, &mut rng, 0.0), inputs);
        let all = time_mask(&inputs, &v, &mut rng, 1.0);
        for (a, o) in all.iter().zip(&inputs) {
            assert_eq!(*a, if *o == b { b } else { v.pad() });
        }
    }

    #[test]
    fn time_mask_rate() {
        let v = VocabSpec::new(64, 20).unwrap();
        let mut rng = rng_for(4, &[]);
        let inputs: Vec<u32> = (0..10_000).map(|i| if i % 7 == 0 { v.boundary() } else { (i % 60) as u32 }).collect();
        let out = time_mask(&inputs, &v, &mut rng, 0.3);
        let maskable = inputs.iter().filter(|&&t| t != v.boundary()).count();
        let padded = out.iter().filter(|&&t| t == v.pad()).count();
        let frac = padded as f64 / maskable as f64;
        assert!((frac - 0.3).abs() < 0.02, "mask fraction {frac}");
        assert!(out.iter().zip(&inputs).all(|(o, i)| *i != v.boundary() || o == i));
    }

    #[test]
    fn identity_pipeline() {
        let cfg = AugmentConfig::identity();
        let mut rng = rng_for(0, &[]);
        for u in random_utts(30) {
            assert_eq!(cfg.apply(&u, &mut rng), u);
        }
    }

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        (1usize..6).prop_flat_map(|l| {
            (
                proptest::collection::vec((1usize..6, proptest::collection::vec(0u32..3, 6)), l),
                proptest::collection::vec(10u32..14, l),
            )
                .prop_map(|(segs, text)| {
                    let mut speech = Vec::new();
                    let mut boundaries = Vec::new();
                    for (len, pool) in segs {
                        speech.extend(pool.into_iter().take(len));
                        boundaries.push(speech.len() - 1);
                    }
                    Utterance { id: "p".into(), speech, text, boundaries }
                })
        })
    }

    proptest! {
        #[test]
        fn augmentations_preserve_invariants(u in arb_utterance(), seed in 0u64..1000, f in 0.3f64..3.0) {
            let mut rng = rng_for(seed, &[]);
            let outs = [
                speed_perturb(&u, f),
                trigger_shift(&u, &mut rng, 0.7, 4),
                random_dedup(&u, &mut rng, 0.6),
                AugmentConfig::default().apply(&u, &mut rng),
            ];
            for out in &outs {
                out.check_structure().unwrap();
                prop_assert_eq!(&out.text, &u.text);
            }
        }

        #[test]
        fn dedup_boundaries_index_kept_frames_of_their_segment(u in arb_utterance(), seed in 0u64..1000) {
            let out = random_dedup(&u, &mut rng_for(seed, &[]), 0.5);
            let orig_segments: Vec<_> = u.segments().collect();
            for (k, seg) in out.segments().enumerate() {
                // the segment keeps its first frame and its token identities
                prop_assert_eq!(out.speech[seg.start], u.speech[orig_segments[k].start]);
                let mut a = out.speech[seg.clone()].to_vec();
                let mut b = u.speech[orig_segments[k].clone()].to_vec();
                a.dedup();
                b.dedup();
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn global_dedup_idempotent(x in proptest::collection::vec(0u32..3, 0..30)) {
            let (once, remap) = global_dedup(&x);
            prop_assert_eq!(&global_dedup(&once).0, &once);
            for (i, &n) in remap.to_new.iter().enumerate() {
                prop_assert_eq!(once[n], x[i]);
            }
        }
    }
}
