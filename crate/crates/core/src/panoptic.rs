//! Panoptic Quality: unique IoU>0.5 segment matching, per-class TP/FP/FN
//! accounting and stuff/things aggregates over 16-bit panoptic rasters.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::io;
use crate::{Error, Result};

/// Sentinel for pixels excluded from evaluation.
pub const VOID: u16 = 65535;

/// Encoded ids pack class and instance as `class * 1000 + instance`.
pub const CLASS_STRIDE: u16 = 1000;

pub fn class_of(id: u16) -> u16 {
    id / CLASS_STRIDE
}

pub fn instance_of(id: u16) -> u16 {
    id % CLASS_STRIDE
}

/// Encode a (class, instance) pair. Classes above 65 or instances above 999
/// do not fit the 16-bit scheme; 65535 is reserved for void.
pub fn encode_id(class_id: u16, instance_id: u16) -> Result<u16> {
    if class_id > 65 {
        return Err(Error::invalid("class id", format!("{class_id} > 65")));
    }
    if instance_id > 999 {
        return Err(Error::invalid("instance id", format!("{instance_id} > 999")));
    }
    let id = class_id as u32 * CLASS_STRIDE as u32 + instance_id as u32;
    if id >= VOID as u32 {
        return Err(Error::invalid(
            "encoded id",
            format!("{id} collides with the void sentinel"),
        ));
    }
    Ok(id as u16)
}

/// Per-pixel (class, instance) raster with a void sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "panoptic map",
                expected: format!("{} ids", height * width),
                got: format!("{}", ids.len()),
            });
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u16) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn id(&self, row: usize, col: usize) -> u16 {
        self.ids[row * self.width + col]
    }

    pub fn set_id(&mut self, row: usize, col: usize, id: u16) {
        self.ids[row * self.width + col] = id;
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let (width, height, samples) = io::read_pgm16(path)?;
        Self::new(height, width, samples)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        io::write_pgm16(path, self.width, self.height, &self.ids)
    }

    /// Check the encoding conventions against a class table: known classes
    /// only, stuff segments carry instance 0, things carry instance >= 1.
    pub fn validate(&self, table: &ClassTable) -> Result<()> {
        for &id in &self.ids {
            if id == VOID {
                continue;
            }
            let class = class_of(id);
            let inst = instance_of(id);
            let def = table.get(class).ok_or_else(|| {
                Error::invalid("panoptic map", format!("unknown class id {class}"))
            })?;
            match def.kind {
                SegmentKind::Stuff if inst != 0 => {
                    return Err(Error::invalid(
                        "panoptic map",
                        format!("stuff class {class} with instance id {inst}"),
                    ));
                }
                SegmentKind::Thing if inst == 0 => {
                    return Err(Error::invalid(
                        "panoptic map",
                        format!("thing class {class} with instance id 0"),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Stuff,
    Thing,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub kind: SegmentKind,
}

/// Class schema: which class ids exist and whether each is stuff or a thing.
/// Serializes as JSON `{ "<class_id>": { "name": ..., "kind": "stuff"|"thing" } }`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassTable {
    classes: BTreeMap<u16, ClassDef>,
}

impl ClassTable {
    pub fn new(classes: BTreeMap<u16, ClassDef>) -> Self {
        Self { classes }
    }

    /// The four street-scene classes used by the synthetic generator:
    /// stuff street/sidewalk, thing car/person.
    pub fn street_scene() -> Self {
        let mut classes = BTreeMap::new();
        for (id, name, kind) in [
            (1u16, "street", SegmentKind::Stuff),
            (2, "sidewalk", SegmentKind::Stuff),
            (3, "car", SegmentKind::Thing),
            (4, "person", SegmentKind::Thing),
        ] {
            classes.insert(
                id,
                ClassDef {
                    name: name.to_string(),
                    kind,
                },
            );
        }
        Self { classes }
    }

    pub fn get(&self, class_id: u16) -> Option<&ClassDef> {
        self.classes.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u16, &ClassDef)> {
        self.classes.iter()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("class table serializes")
    }
}

/// One accepted pred/gt segment pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentMatch {
    pub pred_id: u16,
    pub gt_id: u16,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// Matching outcome for one image pair: accepted matches plus the surviving
/// unmatched segments on each side, as (encoded id, area).
#[derive(Clone, Debug, Default)]
pub struct MatchOutcome {
    pub matches: Vec<SegmentMatch>,
    pub unmatched_pred: Vec<(u16, u64)>,
    pub unmatched_gt: Vec<(u16, u64)>,
}

/// Match segments between a prediction and a ground truth map.
///
/// A single pass builds the joint histogram of (pred id, gt id) pixel pairs.
/// IoU excludes void from the union on both sides: for pred segment p and gt
/// segment g, `union = |p| + |g| - |p∩g| - |p∩void_gt| - |g∩void_pred|`.
/// Pairs with equal class and IoU > 0.5 are matches; the >0.5 rule makes the
/// matching unique. An unmatched prediction whose overlap with ground-truth
/// void exceeds half its area is discarded rather than counted as a false
/// positive.
pub fn match_segments(pred: &PanopticMap, gt: &PanopticMap) -> Result<MatchOutcome> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::DimensionMismatch(
            pred.height,
            pred.width,
            gt.height,
            gt.width,
        ));
    }

    let mut joint: HashMap<(u16, u16), u64> = HashMap::new();
    let mut pred_area: HashMap<u16, u64> = HashMap::new();
    let mut gt_area: HashMap<u16, u64> = HashMap::new();
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        *joint.entry((p, g)).or_insert(0) += 1;
        if p != VOID {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if g != VOID {
            *gt_area.entry(g).or_insert(0) += 1;
        }
    }

    let pred_void_overlap = |p: u16| joint.get(&(p, VOID)).copied().unwrap_or(0);
    let gt_void_overlap = |g: u16| joint.get(&(VOID, g)).copied().unwrap_or(0);

    let mut matches = Vec::new();
    let mut matched_pred: HashMap<u16, u16> = HashMap::new();
    let mut matched_gt: HashMap<u16, u16> = HashMap::new();
    for (&(p, g), &intersection) in &joint {
        if p == VOID || g == VOID || class_of(p) != class_of(g) {
            continue;
        }
        let union =
            pred_area[&p] + gt_area[&g] - intersection - pred_void_overlap(p) - gt_void_overlap(g);
        let iou = intersection as f64 / union as f64;
        if iou > 0.5 {
            // IoU > 0.5 guarantees at most one match per segment on each side.
            let prev_p = matched_pred.insert(p, g);
            let prev_g = matched_gt.insert(g, p);
            debug_assert!(prev_p.is_none() && prev_g.is_none(), "non-unique match");
            matches.push(SegmentMatch {
                pred_id: p,
                gt_id: g,
                intersection,
                union,
                iou,
            });
        }
    }
    matches.sort_by_key(|m| (m.pred_id, m.gt_id));

    let mut unmatched_pred: Vec<(u16, u64)> = pred_area
        .iter()
        .filter(|(id, _)| !matched_pred.contains_key(id))
        // mostly-void predictions are not the model's fault; drop them
        .filter(|(&id, &area)| 2 * pred_void_overlap(id) <= area)
        .map(|(&id, &area)| (id, area))
        .collect();
    unmatched_pred.sort_unstable();
    let mut unmatched_gt: Vec<(u16, u64)> = gt_area
        .iter()
        .filter(|(id, _)| !matched_gt.contains_key(id))
        .map(|(&id, &area)| (id, area))
        .collect();
    unmatched_gt.sort_unstable();

    Ok(MatchOutcome {
        matches,
        unmatched_pred,
        unmatched_gt,
    })
}

/// Per-class running totals, summed over images before any ratio is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_count: u64,
    pub iou_sum: f64,
}

/// Accumulates match outcomes across images.
#[derive(Clone, Debug, Default)]
pub struct PqAccumulator {
    per_class: BTreeMap<u16, ClassStats>,
}

impl PqAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, outcome: &MatchOutcome) {
        for m in &outcome.matches {
            let s = self.per_class.entry(class_of(m.gt_id)).or_default();
            s.tp += 1;
            s.iou_sum += m.iou;
        }
        for &(id, _) in &outcome.unmatched_pred {
            self.per_class.entry(class_of(id)).or_default().fp += 1;
        }
        for &(id, _) in &outcome.unmatched_gt {
            self.per_class.entry(class_of(id)).or_default().fn_count += 1;
        }
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        for (&class, s) in &other.per_class {
            let t = self.per_class.entry(class).or_default();
            t.tp += s.tp;
            t.fp += s.fp;
            t.fn_count += s.fn_count;
            t.iou_sum += s.iou_sum;
        }
    }

    /// Form the PQ/SQ/RQ ratios. Classes from the table that appear in
    /// neither map are excluded from every mean and listed as skipped.
    pub fn report(&self, table: &ClassTable) -> Result<PqReport> {
        for &class in self.per_class.keys() {
            if table.get(class).is_none() {
                return Err(Error::invalid(
                    "pq accumulation",
                    format!("class id {class} not in class table"),
                ));
            }
        }
        let mut classes = Vec::new();
        let mut skipped = Vec::new();
        for (&class_id, def) in table.iter() {
            let stats = self.per_class.get(&class_id).copied().unwrap_or_default();
            if stats.tp + stats.fp + stats.fn_count == 0 {
                skipped.push(class_id);
                continue;
            }
            let denom = stats.tp as f64 + 0.5 * stats.fp as f64 + 0.5 * stats.fn_count as f64;
            let pq = stats.iou_sum / denom;
            let sq = if stats.tp > 0 {
                stats.iou_sum / stats.tp as f64
            } else {
                0.0
            };
            let rq = stats.tp as f64 / denom;
            classes.push(ClassReport {
                class_id,
                name: def.name.clone(),
                kind: def.kind,
                stats,
                pq,
                sq,
                rq,
            });
        }
        let mean = |kind: Option<SegmentKind>| -> Option<f64> {
            let vals: Vec<f64> = classes
                .iter()
                .filter(|c| kind.is_none_or(|k| c.kind == k))
                .map(|c| c.pq)
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        Ok(PqReport {
            pq_all: mean(None),
            pq_stuff: mean(Some(SegmentKind::Stuff)),
            pq_things: mean(Some(SegmentKind::Thing)),
            classes,
            skipped,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub class_id: u16,
    pub name: String,
    pub kind: SegmentKind,
    #[serde(flatten)]
    pub stats: ClassStats,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Full evaluation report: per-class rows plus unweighted class means.
#[derive(Clone, Debug, Serialize)]
pub struct PqReport {
    pub classes: Vec<ClassReport>,
    pub pq_all: Option<f64>,
    pub pq_stuff: Option<f64>,
    pub pq_things: Option<f64>,
    /// Classes from the table absent from both maps, excluded from means.
    pub skipped: Vec<u16>,
}

impl PqReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with one row per class followed by the all/stuff/things means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,name,kind,tp,fp,fn,iou_sum,pq,sq,rq\n");
        for c in &self.classes {
            let kind = match c.kind {
                SegmentKind::Stuff => "stuff",
                SegmentKind::Thing => "thing",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.class_id,
                c.name,
                kind,
                c.stats.tp,
                c.stats.fp,
                c.stats.fn_count,
                c.stats.iou_sum,
                c.pq,
                c.sq,
                c.rq
            )
            .expect("string write");
        }
        for (label, value) in [
            ("all", self.pq_all),
            ("stuff", self.pq_stuff),
            ("things", self.pq_things),
        ] {
            let text = value.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{label},,,,,,,{text},,").expect("string write");
        }
        out
    }
}

/// Match and accumulate a single image pair.
pub fn compute_pq(pred: &PanopticMap, gt: &PanopticMap, table: &ClassTable) -> Result<PqReport> {
    let outcome = match_segments(pred, gt)?;
    let mut acc = PqAccumulator::new();
    acc.add(&outcome);
    acc.report(table)
}

/// List the `.pgm` rasters of `gt_dir`, require the same filenames in
/// `pred_dir` (and vice versa), and return the sorted pairs.
pub fn paired_map_files(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".pgm") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let gt_names = list(gt_dir)?;
    let pred_names = list(pred_dir)?;
    for name in &gt_names {
        if !pred_names.contains(name) {
            return Err(Error::MissingCounterpart(pred_dir.join(name)));
        }
    }
    for name in &pred_names {
        if !gt_names.contains(name) {
            return Err(Error::MissingCounterpart(gt_dir.join(name)));
        }
    }
    Ok(gt_names
        .into_iter()
        .map(|n| (pred_dir.join(&n), gt_dir.join(&n)))
        .collect())
}

/// Evaluate a directory of predictions against a directory of ground truth
/// maps paired by filename. TP/FP/FN and matched IoU are summed over all
/// images before the PQ ratio is formed.
///
/// `threads` bounds the worker count. Workers only match images; the
/// reduction always runs sequentially in filename order, so every thread
/// count produces bit-identical reports.
pub fn evaluate_dataset(
    pred_dir: &Path,
    gt_dir: &Path,
    table: &ClassTable,
    threads: usize,
) -> Result<PqReport> {
    let pairs = paired_map_files(pred_dir, gt_dir)?;
    let threads = threads.max(1).min(pairs.len().max(1));
    let chunk = pairs.len().div_ceil(threads).max(1);

    let eval_pair = |(pred_path, gt_path): &(PathBuf, PathBuf)| -> Result<MatchOutcome> {
        let pred = PanopticMap::read_pgm(pred_path)?;
        let gt = PanopticMap::read_pgm(gt_path)?;
        match_segments(&pred, &gt)
    };

    let outcomes: Vec<Result<MatchOutcome>> = if threads <= 1 {
        pairs.iter().map(eval_pair).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = pairs
                .chunks(chunk)
                .map(|chunk_pairs| {
                    scope.spawn(move || chunk_pairs.iter().map(eval_pair).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("pq worker panicked"))
                .collect()
        })
    };
    let mut acc = PqAccumulator::new();
    for outcome in outcomes {
        acc.add(&outcome?);
    }
    acc.report(table)
}
