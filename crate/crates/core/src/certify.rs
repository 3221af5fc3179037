//! Vote aggregation, certification thresholds and the exhaustive adversary.
//!
//! The smoothed classifier returns the class with the most ablation votes
//! (lowest class index on ties). A prediction is certified against an
//! `m x m` patch when the winner beats the runner-up by more than `2 * delta`,
//! where `delta` bounds how many ablations one patch placement can touch.
//! Certification is integer-only.
//!
//! Two independent routes compute `delta`:
//! * [`delta_closed_form`], arithmetic on the strided ablation grid;
//! * [`delta_oracle`], which materializes every ablation mask and counts
//!   intersections for every patch placement.
//!
//! Adversarial patches never wrap around the image; ablations do.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{ablate, ablation_mask, AblatedImage, AblationKind, AblationSpec, Image, Mask};
use crate::error::{Error, Result};

/// Upper bound on `|set| * placements` for the enumeration routines.
pub const ENUMERATION_BUDGET: u128 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCounts {
    counts: Vec<u64>,
}

impl VoteCounts {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn aggregate_votes(predictions: &[usize], k: usize) -> Result<VoteCounts> {
    let mut counts = vec![0u64; k];
    for (i, &p) in predictions.iter().enumerate() {
        let slot = counts
            .get_mut(p)
            .ok_or_else(|| Error::Input(format!("prediction {i} is class {p}, outside [0, {k})")))?;
        *slot += 1;
    }
    Ok(VoteCounts { counts })
}

/// Index of the largest count, lowest index on ties.
fn argmax_excluding(counts: &[u64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &n) in counts.iter().enumerate() {
        if Some(c) == skip {
            continue;
        }
        if best.is_none_or(|b| n > counts[b]) {
            best = Some(c);
        }
    }
    best
}

pub fn smoothed_predict(votes: &VoteCounts) -> Result<usize> {
    if votes.total() == 0 {
        return Err(Error::EmptyVotes);
    }
    Ok(argmax_excluding(&votes.counts, None).expect("nonzero total implies a class"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    /// Exact grid arithmetic; never below the true intersection count.
    #[default]
    Safe,
    /// The published formulas, kept for reproducing reported thresholds.
    Paper,
    /// Exhaustive enumeration, only feasible on small images.
    Oracle,
}

impl std::fmt::Display for DeltaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DeltaMode::Safe => "safe",
            DeltaMode::Paper => "paper",
            DeltaMode::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for DeltaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safe" => Ok(DeltaMode::Safe),
            "paper" => Ok(DeltaMode::Paper),
            "oracle" => Ok(DeltaMode::Oracle),
            other => Err(Error::param(format!("unknown delta mode {other:?}"))),
        }
    }
}

/// An `m x m` adversarial patch placed anywhere fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchThreatModel {
    pub m: usize,
}

impl PatchThreatModel {
    pub fn new(m: usize, h: usize, w: usize) -> Result<Self> {
        if m == 0 || m > h.min(w) {
            return Err(Error::param(format!(
                "patch size m={m} must be in [1, {}] for a {h}x{w} image",
                h.min(w)
            )));
        }
        Ok(Self { m })
    }

    /// All `(top, left)` placements, row-major.
    pub fn placements(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..=h - self.m)
            .flat_map(|top| (0..=w - self.m).map(move |left| (top, left)))
            .collect()
    }
}

/// Grid points `offset + k * stride` (`k < n`) inside `[lo, hi]`.
fn grid_points_in(offset: usize, stride: usize, n: usize, lo: usize, hi: usize) -> usize {
    if lo > hi {
        return 0;
    }
    let first = if lo <= offset {
        0
    } else {
        (lo - offset).div_ceil(stride)
    };
    if hi < offset {
        return 0;
    }
    let last = ((hi - offset) / stride).min(n - 1);
    if last < first {
        0
    } else {
        last - first + 1
    }
}

/// Most ablations along one axis that an `m`-long, non-wrapping patch can meet.
///
/// Ablations start at `offset, offset + stride, ...` below `len` and cover
/// `b` cells each, wrapping at `len`. When the grid is cyclically uniform
/// (the wrap gap equals the stride) this is `ceil((m + b - 1) / stride)`
/// capped at the set size. Otherwise the seam gap is shorter than the stride
/// and windows straddling it can hold one extra start, so the maximum is
/// taken over placements whose far edge sits on a start (plus placement 0).
fn axis_delta(len: usize, b: usize, stride: usize, offset: usize, m: usize) -> u64 {
    let n = (len - offset).div_ceil(stride);
    let reach = m + b - 1;
    if reach >= len {
        return n as u64;
    }
    let seam_gap = len - stride * (n - 1);
    if seam_gap == stride {
        return reach.div_ceil(stride).min(n) as u64;
    }
    // Ablations meeting a patch at column l start in [l - b + 1, l + m - 1] mod len.
    let count = |l: usize| {
        let lo = (l + 1).saturating_sub(b);
        let mut c = grid_points_in(offset, stride, n, lo, l + m - 1);
        if l + 1 < b {
            c += grid_points_in(offset, stride, n, len + l + 1 - b, len - 1);
        }
        c
    };
    let candidates = std::iter::once(0).chain(
        (0..n)
            .map(|k| offset + k * stride)
            .filter(|&t| t + 1 >= m && t + 1 - m <= len - m)
            .map(|t| t + 1 - m),
    );
    candidates.map(count).max().unwrap_or(0) as u64
}

fn check_patch(h: usize, w: usize, spec: &AblationSpec, m: usize) -> Result<()> {
    spec.validate(h, w)?;
    PatchThreatModel::new(m, h, w).map(|_| ())
}

/// Closed-form certification threshold. `h` and `w` are only read in safe mode.
pub fn delta_closed_form(h: usize, w: usize, spec: &AblationSpec, m: usize, mode: DeltaMode) -> Result<u64> {
    let (b, s) = (spec.b as u64, spec.stride as u64);
    let m64 = m as u64;
    match mode {
        DeltaMode::Paper => {
            if m == 0 || spec.b == 0 || spec.stride == 0 {
                return Err(Error::param("m, b and stride must be positive"));
            }
            let per_axis = if s == 1 { m64 + b - 1 } else { (m64 + s - 1).div_ceil(s) };
            Ok(match spec.kind {
                AblationKind::Column => per_axis,
                AblationKind::Block => per_axis * per_axis,
            })
        }
        DeltaMode::Safe => {
            check_patch(h, w, spec, m)?;
            let cols = axis_delta(w, spec.b, spec.stride, spec.offset, m);
            Ok(match spec.kind {
                AblationKind::Column => cols,
                AblationKind::Block => axis_delta(h, spec.b, spec.stride, spec.offset, m) * cols,
            })
        }
        DeltaMode::Oracle => delta_oracle(h, w, spec, m),
    }
}

/// Threshold for the requested mode; oracle mode enumerates.
pub fn delta_for(h: usize, w: usize, spec: &AblationSpec, m: usize, mode: DeltaMode) -> Result<u64> {
    delta_closed_form(h, w, spec, m, mode)
}

/// Inclusive 2-D prefix sums of a mask, `(h + 1) x (w + 1)`.
struct MaskIntegral {
    w1: usize,
    sums: Vec<u32>,
}

impl MaskIntegral {
    fn new(mask: &Mask) -> Self {
        let (h, w) = (mask.height(), mask.width());
        let w1 = w + 1;
        let mut sums = vec![0u32; (h + 1) * w1];
        for r in 0..h {
            for c in 0..w {
                sums[(r + 1) * w1 + c + 1] =
                    mask.get(r, c) as u32 + sums[r * w1 + c + 1] + sums[(r + 1) * w1 + c] - sums[r * w1 + c];
            }
        }
        Self { w1, sums }
    }

    fn region(&self, top: usize, left: usize, m: usize) -> u32 {
        let s = |r: usize, c: usize| self.sums[r * self.w1 + c];
        s(top + m, left + m) + s(top, left) - s(top, left + m) - s(top + m, left)
    }
}

fn check_budget(h: usize, w: usize, spec: &AblationSpec, m: usize) -> Result<()> {
    let set = spec.set_size(h, w) as u128;
    let placements = ((h - m + 1) * (w - m + 1)) as u128;
    let needed = set * placements;
    if needed > ENUMERATION_BUDGET {
        return Err(Error::Budget {
            needed,
            limit: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// A patch placement `(top, left)` and the ablations its footprint meets.
pub type Placement = ((usize, usize), Vec<usize>);

/// For every placement (row-major), the indices of ablations whose mask meets the patch.
pub fn intersections(h: usize, w: usize, spec: &AblationSpec, m: usize) -> Result<Vec<Placement>> {
    check_patch(h, w, spec, m)?;
    check_budget(h, w, spec, m)?;
    let threat = PatchThreatModel { m };
    let placements = threat.placements(h, w);
    let mut hit: Vec<Vec<usize>> = vec![Vec::new(); placements.len()];
    for (idx, anchor) in spec.anchors(h, w)?.into_iter().enumerate() {
        let integral = MaskIntegral::new(&ablation_mask(h, w, spec.b, anchor)?);
        for (p, &(top, left)) in placements.iter().enumerate() {
            if integral.region(top, left, m) > 0 {
                hit[p].push(idx);
            }
        }
    }
    Ok(placements.into_iter().zip(hit).collect())
}

/// Exact threshold by enumeration: the most ablation masks any single
/// in-bounds `m x m` patch placement intersects.
pub fn delta_oracle(h: usize, w: usize, spec: &AblationSpec, m: usize) -> Result<u64> {
    check_patch(h, w, spec, m)?;
    check_budget(h, w, spec, m)?;
    let placements = PatchThreatModel { m }.placements(h, w);
    let mut hits = vec![0u64; placements.len()];
    for anchor in spec.anchors(h, w)? {
        let integral = MaskIntegral::new(&ablation_mask(h, w, spec.b, anchor)?);
        for (p, &(top, left)) in placements.iter().enumerate() {
            if integral.region(top, left, m) > 0 {
                hits[p] += 1;
            }
        }
    }
    Ok(hits.into_iter().max().unwrap_or(0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Certificate {
    pub predicted: usize,
    pub runner_up: usize,
    pub margin: u64,
    pub delta: u64,
    pub patch_m: usize,
    pub certified: bool,
    pub delta_mode: DeltaMode,
}

pub fn certify_votes(votes: &VoteCounts, delta: u64, m: usize, mode: DeltaMode) -> Result<Certificate> {
    let predicted = smoothed_predict(votes)?;
    if votes.classes() < 2 {
        return Err(Error::Input("certification needs at least two classes".into()));
    }
    let runner_up = argmax_excluding(&votes.counts, Some(predicted)).expect("k >= 2");
    let top = votes.counts[predicted];
    let rival = votes.counts[runner_up];
    Ok(Certificate {
        predicted,
        runner_up,
        margin: top - rival,
        delta,
        patch_m: m,
        certified: top > rival + 2 * delta,
        delta_mode: mode,
    })
}

/// Result of the exhaustive adversary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub clean_prediction: usize,
    /// Smoothed prediction after the most damaging reassignment found.
    pub worst_prediction: usize,
    /// Placement achieving `worst_prediction`; when no placement changes the
    /// prediction, the one touching the most ablations.
    pub placement: (usize, usize),
    /// Class all touched ablations were reassigned to.
    pub reassigned_to: usize,
    pub intersected: usize,
}

impl FlipOutcome {
    pub fn changed(&self) -> bool {
        self.worst_prediction != self.clean_prediction
    }
}

/// Tries every placement and every target class, moving all intersected
/// ablation votes to the target. The adversary tries to dislodge
/// `true_class` when the clean prediction equals it, else the clean
/// prediction itself.
pub fn adversarial_flip_search(
    predictions: &[usize],
    k: usize,
    spec: &AblationSpec,
    h: usize,
    w: usize,
    m: usize,
    true_class: usize,
) -> Result<FlipOutcome> {
    if m == 0 || m > h.min(w) {
        return Err(Error::Input(format!(
            "no placement of a {m}x{m} patch fits a {h}x{w} image"
        )));
    }
    if true_class >= k {
        return Err(Error::Input(format!("true class {true_class} outside [0, {k})")));
    }
    let expected = spec.set_size(h, w);
    if predictions.len() != expected {
        return Err(Error::Input(format!(
            "{} predictions for an ablation set of {expected}",
            predictions.len()
        )));
    }
    let clean = aggregate_votes(predictions, k)?;
    let clean_prediction = smoothed_predict(&clean)?;

    let table = intersections(h, w, spec, m)?;
    let mut fallback: Option<FlipOutcome> = None;
    for ((top, left), touched) in table {
        let mut base = clean.counts.clone();
        for &i in &touched {
            base[predictions[i]] -= 1;
        }
        for target in 0..k {
            if target == clean_prediction {
                continue;
            }
            let mut counts = base.clone();
            counts[target] += touched.len() as u64;
            let after = argmax_excluding(&counts, None).expect("k >= 1");
            let outcome = FlipOutcome {
                clean_prediction,
                worst_prediction: after,
                placement: (top, left),
                reassigned_to: target,
                intersected: touched.len(),
            };
            if after != clean_prediction {
                return Ok(outcome);
            }
            if fallback.as_ref().is_none_or(|f| touched.len() > f.intersected) {
                fallback = Some(outcome);
            }
        }
    }
    Ok(fallback.unwrap_or(FlipOutcome {
        clean_prediction,
        worst_prediction: clean_prediction,
        placement: (0, 0),
        reassigned_to: clean_prediction,
        intersected: 0,
    }))
}

/// A classifier applied to single ablations.
pub trait BaseClassifier {
    fn classes(&self) -> usize;
    fn classify(&self, ablation: &AblatedImage) -> Result<usize>;
}

/// Per-ablation predictions over the whole ablation set, in set order.
pub fn ablation_predictions<C: BaseClassifier + ?Sized>(
    model: &C,
    x: &Image,
    spec: &AblationSpec,
) -> Result<Vec<usize>> {
    spec.anchors(x.height(), x.width())?
        .into_iter()
        .map(|a| model.classify(&ablate(x, spec.b, a)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedRow {
    pub m: usize,
    pub delta: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub counts: Vec<u64>,
    pub certificates: Vec<Certificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub spec: AblationSpec,
    pub delta_mode: DeltaMode,
    pub standard_accuracy: f64,
    pub certified: Vec<CertifiedRow>,
    pub per_image: Vec<ImageRecord>,
}

impl CertificationReport {
    /// One row per patch size.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("kind,b,stride,offset,delta_mode,m,delta,standard_accuracy,certified_accuracy\n");
        for row in &self.certified {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.6}\n",
                self.spec.kind,
                self.spec.b,
                self.spec.stride,
                self.spec.offset,
                self.delta_mode,
                row.m,
                row.delta,
                self.standard_accuracy,
                row.accuracy
            ));
        }
        out
    }
}

/// Standard and certified accuracy of the smoothed classifier over a dataset.
///
/// Images are processed in parallel on the current rayon pool; results are
/// collected in dataset order, so the report does not depend on the worker
/// count.
pub fn certified_accuracy<C: BaseClassifier + Sync + ?Sized>(
    images: &[Image],
    labels: &[usize],
    model: &C,
    spec: &AblationSpec,
    patch_sizes: &[usize],
    mode: DeltaMode,
) -> Result<CertificationReport> {
    if images.is_empty() {
        return Err(Error::Input("cannot certify an empty dataset".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let (h, w) = (images[0].height(), images[0].width());
    if let Some(i) = images.iter().position(|x| x.height() != h || x.width() != w) {
        return Err(Error::Input(format!("image {i} differs in size from image 0")));
    }
    let deltas: Vec<u64> = patch_sizes
        .iter()
        .map(|&m| delta_for(h, w, spec, m, mode))
        .collect::<Result<_>>()?;
    let k = model.classes();

    let per_image: Vec<ImageRecord> = images
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(index, (x, &label))| {
            let votes = aggregate_votes(&ablation_predictions(model, x, spec)?, k)?;
            let prediction = smoothed_predict(&votes)?;
            let certificates = patch_sizes
                .iter()
                .zip(&deltas)
                .map(|(&m, &d)| certify_votes(&votes, d, m, mode))
                .collect::<Result<_>>()?;
            Ok(ImageRecord {
                index,
                label,
                prediction,
                counts: votes.counts,
                certificates,
            })
        })
        .collect::<Result<_>>()?;

    let n = per_image.len() as f64;
    let correct = per_image.iter().filter(|r| r.prediction == r.label).count();
    let certified = patch_sizes
        .iter()
        .zip(&deltas)
        .enumerate()
        .map(|(j, (&m, &delta))| {
            let ok = per_image
                .iter()
                .filter(|r| r.prediction == r.label && r.certificates[j].certified)
                .count();
            CertifiedRow {
                m,
                delta,
                accuracy: ok as f64 / n,
            }
        })
        .collect();
    Ok(CertificationReport {
        spec: *spec,
        delta_mode: mode,
        standard_accuracy: correct as f64 / n,
        certified,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_votes(&[0, 0, 1], 2).unwrap().counts(), &[2, 1]);
        let empty = aggregate_votes(&[], 3).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(matches!(smoothed_predict(&empty), Err(Error::EmptyVotes)));
        let v = aggregate_votes(&[3; 224], 10).unwrap();
        assert_eq!(v.counts()[3], 224);
        assert!(aggregate_votes(&[0, 2], 2).is_err());
    }

    #[test]
    fn predict_examples() {
        let p = |c: Vec<u64>| smoothed_predict(&VoteCounts::from_counts(c)).unwrap();
        assert_eq!(p(vec![5, 3]), 0);
        assert_eq!(p(vec![4, 4]), 0);
        assert_eq!(p(vec![2, 7, 1]), 1);
    }

    #[test]
    fn closed_form_examples() {
        let col = AblationSpec::column(19);
        for mode in [DeltaMode::Safe, DeltaMode::Paper] {
            assert_eq!(delta_closed_form(224, 224, &col, 32, mode).unwrap(), 50);
        }
        let s10 = col.with_stride(10);
        // 224 = 22 * 10 + 4: the start at 220 wraps onto columns 0..14
        assert_eq!(delta_closed_form(224, 224, &s10, 32, DeltaMode::Safe).unwrap(), 6);
        assert_eq!(delta_closed_form(220, 220, &s10, 32, DeltaMode::Safe).unwrap(), 5);
        assert_eq!(delta_closed_form(224, 224, &s10, 32, DeltaMode::Paper).unwrap(), 5);
        let s5 = col.with_stride(5);
        assert_eq!(delta_closed_form(224, 224, &s5, 32, DeltaMode::Safe).unwrap(), 11);
        assert_eq!(delta_closed_form(225, 225, &s5, 32, DeltaMode::Safe).unwrap(), 10);
        assert_eq!(delta_closed_form(224, 224, &s5, 32, DeltaMode::Paper).unwrap(), 8);
        let blk = AblationSpec::block(75);
        for mode in [DeltaMode::Safe, DeltaMode::Paper] {
            assert_eq!(delta_closed_form(224, 224, &blk, 32, mode).unwrap(), 11_236);
        }
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(delta_oracle(4, 8, &AblationSpec::column(3), 2).unwrap(), 4);
        assert_eq!(
            delta_oracle(4, 12, &AblationSpec::column(3).with_stride(2), 2).unwrap(),
            2
        );
        for b in 1..=6 {
            assert_eq!(delta_oracle(6, 6, &AblationSpec::column(b), 6).unwrap(), 6);
        }
        let s5 = AblationSpec::column(19).with_stride(5);
        assert_eq!(delta_oracle(32, 224, &s5, 32).unwrap(), 11);
        assert_eq!(delta_oracle(32, 225, &s5, 32).unwrap(), 10);
        assert_eq!(delta_oracle(32, 224, &s5.with_stride(10), 32).unwrap(), 6);
    }

    #[test]
    fn oracle_budget_guard() {
        let err = delta_oracle(224, 224, &AblationSpec::block(75), 32).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
    }

    #[test]
    fn seam_gap_adds_a_start() {
        // starts {0, 2, 4} on w=5; a width-2 ablation at 4 wraps onto column 0
        let spec = AblationSpec::column(2).with_stride(2);
        assert_eq!(delta_oracle(1, 5, &spec, 1).unwrap(), 2);
        assert_eq!(delta_closed_form(1, 5, &spec, 1, DeltaMode::Safe).unwrap(), 2);
    }

    #[test]
    fn certify_examples() {
        let c = |v: Vec<u64>, d| certify_votes(&VoteCounts::from_counts(v), d, 2, DeltaMode::Safe).unwrap();
        assert!(c(vec![10, 3], 3).certified);
        assert!(!c(vec![10, 4], 3).certified);
        let mut v = vec![0; 10];
        v[0] = 224;
        let cert = c(v, 50);
        assert!(cert.certified);
        assert_eq!(cert.margin, 224);
        assert_eq!(cert.runner_up, 1);
        assert!(certify_votes(&VoteCounts::from_counts(vec![0, 0]), 1, 1, DeltaMode::Safe).is_err());
    }

    #[test]
    fn flip_search_examples() {
        // 5 column ablations on w=5, b=1: a 2-wide patch touches 2 of them
        let spec = AblationSpec::column(1);
        let out = adversarial_flip_search(&[0; 5], 2, &spec, 5, 5, 2, 0).unwrap();
        assert!(!out.changed());
        assert_eq!(out.intersected, 2);

        // counts [3, 2]: one reassigned vote gives [2, 3]
        let out = adversarial_flip_search(&[0, 1, 0, 1, 0], 2, &spec, 5, 5, 1, 0).unwrap();
        assert!(out.changed());
        assert_eq!(out.worst_prediction, 1);

        // a tie flips toward the lower index: predicted 1 over [2, 3], one touched vote
        let out = adversarial_flip_search(&[1, 0, 1, 0, 1], 2, &spec, 5, 5, 1, 1).unwrap();
        assert_eq!(out.clean_prediction, 1);
        assert!(out.changed());
        assert_eq!(out.worst_prediction, 0);

        assert!(adversarial_flip_search(&[0; 5], 2, &spec, 5, 5, 6, 0).is_err());
    }

    proptest! {
        #[test]
        fn prediction_ignores_order(mut preds in proptest::collection::vec(0usize..4, 1..40), seed in any::<u64>()) {
            let before = smoothed_predict(&aggregate_votes(&preds, 4).unwrap()).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            preds.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, smoothed_predict(&aggregate_votes(&preds, 4).unwrap()).unwrap());
        }

        #[test]
        fn paper_mode_unstrided_column(m in 1usize..64, b in 1usize..64) {
            let spec = AblationSpec::column(b);
            prop_assert_eq!(delta_closed_form(0, 0, &spec, m, DeltaMode::Paper).unwrap(), (m + b - 1) as u64);
        }

        #[test]
        fn safe_matches_oracle_small(w in 2usize..20, b_frac in 0.0f64..1.0, s in 1usize..5, m_frac in 0.0f64..1.0, off in 0usize..5, block in any::<bool>()) {
            let s = s.min(w);
            let b = 1 + ((w - 1) as f64 * b_frac) as usize;
            let m = 1 + ((w - 1) as f64 * m_frac) as usize;
            let kind = if block { AblationKind::Block } else { AblationKind::Column };
            let spec = AblationSpec { kind, b, stride: s, offset: off % s };
            let h = if block { w } else { m };
            prop_assert_eq!(
                delta_closed_form(h, w, &spec, m, DeltaMode::Safe).unwrap(),
                delta_oracle(h, w, &spec, m).unwrap()
            );
        }
    }
}
