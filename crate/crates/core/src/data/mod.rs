//! Bag-structured datasets.
//!
//! On disk a dataset is a comma-delimited UTF-8 file with header
//! `bag_id,label,f0,...,f{d-1}`, one instance per row. Rows sharing a
//! `bag_id` form a bag; the label column holds `-1` or `1`.

pub mod folds;
pub mod normalize;
pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};

pub use folds::{stratified_kfold, FoldPlan};
pub use normalize::Normalizer;
pub use synth::{synth_generate, SynthConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// `-1` or `+1`.
    pub fn sign(self) -> i8 {
        match self {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }

    /// 0/1 training target.
    pub fn target(self) -> usize {
        self.is_positive() as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "-1" | "-1.0" => Some(Label::Negative),
            "1" | "+1" | "1.0" => Some(Label::Positive),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.sign())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: Label,
    /// One row per instance.
    pub instances: Array2<f64>,
    /// Ground-truth instance labels, when known (synthetic data).
    pub instance_labels: Option<Vec<bool>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilDataset {
    bags: Vec<Bag>,
    dim: usize,
}

impl MilDataset {
    pub fn new(bags: Vec<Bag>) -> Result<Self> {
        let first = bags
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no bags".into()))?;
        let dim = first.instances.ncols();
        if dim == 0 {
            return Err(Error::InvalidInput("instances have no features".into()));
        }
        for bag in &bags {
            if bag.is_empty() {
                return Err(Error::InvalidInput(format!("bag `{}` has no instances", bag.id)));
            }
            if bag.instances.ncols() != dim {
                return Err(Error::InvalidShape(format!(
                    "bag `{}` has {} features, expected {dim}",
                    bag.id,
                    bag.instances.ncols()
                )));
            }
            if let Some(truth) = &bag.instance_labels {
                if truth.len() != bag.len() {
                    return Err(Error::InvalidInput(format!(
                        "bag `{}` has {} instance labels for {} instances",
                        bag.id,
                        truth.len(),
                        bag.len()
                    )));
                }
                // a bag is negative iff every instance is negative
                let any_pos = truth.iter().any(|&t| t);
                if any_pos != bag.label.is_positive() {
                    return Err(Error::InvalidInput(format!(
                        "bag `{}` labelled {} violates the MIL labeling rule",
                        bag.id, bag.label
                    )));
                }
            }
        }
        Ok(Self { bags, dim })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn n_positive_bags(&self) -> usize {
        self.bags.iter().filter(|b| b.label.is_positive()).count()
    }

    pub fn n_negative_bags(&self) -> usize {
        self.len() - self.n_positive_bags()
    }

    pub fn has_truth(&self) -> bool {
        self.bags.iter().all(|b| b.instance_labels.is_some())
    }

    /// New dataset holding the bags at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.bags[i].clone()).collect())
    }

    /// Replaces every instance matrix through `f`, keeping labels.
    pub fn map_instances(&self, mut f: impl FnMut(&Array2<f64>) -> Array2<f64>) -> Result<Self> {
        Self::new(
            self.bags
                .iter()
                .map(|b| Bag {
                    instances: f(&b.instances),
                    ..b.clone()
                })
                .collect(),
        )
    }

    /// All instances stacked in bag order, with the bag label of each row.
    pub fn stacked(&self) -> (Array2<f64>, Vec<Label>) {
        let views: Vec<_> = self.bags.iter().map(|b| b.instances.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let labels = self
            .bags
            .iter()
            .flat_map(|b| std::iter::repeat(b.label).take(b.len()))
            .collect();
        (x, labels)
    }

    /// Ground-truth instance labels stacked in bag order.
    pub fn stacked_truth(&self) -> Option<Vec<bool>> {
        let mut out = Vec::with_capacity(self.n_instances());
        for b in &self.bags {
            out.extend(b.instance_labels.as_ref()?);
        }
        Some(out)
    }

    /// Fraction of instances that sit in positive bags.
    pub fn positive_instance_fraction(&self) -> f64 {
        let pos: usize = self
            .bags
            .iter()
            .filter(|b| b.label.is_positive())
            .map(Bag::len)
            .sum();
        pos as f64 / self.n_instances() as f64
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a bag file. Rows are grouped by `bag_id` in order of first appearance.
pub fn load_bags(path: impl AsRef<Path>) -> Result<MilDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bags(file, path)
}

pub fn read_bags<R: Read>(reader: R, path: &Path) -> Result<MilDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "bag_id" || &header[1] != "label" {
        return Err(parse_err(path, 1, "header must be `bag_id,label,f0,...`"));
    }
    let dim = header.len() - 2;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Label, Vec<f64>)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != dim + 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", dim + 2, rec.len()),
            ));
        }
        let id = rec[0].to_string();
        let label = Label::parse(&rec[1])
            .ok_or_else(|| parse_err(path, line, format!("label `{}` is not -1 or 1", &rec[1])))?;
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (label, Vec::new())
        });
        if entry.0 != label {
            return Err(parse_err(
                path,
                line,
                format!("bag `{id}` has conflicting labels {} and {label}", entry.0),
            ));
        }
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line, format!("field f{j} = `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("field f{j} is not finite")));
            }
            entry.1.push(v);
        }
    }
    let bags = order
        .into_iter()
        .map(|id| {
            let (label, values) = groups.remove(&id).expect("grouped");
            let n = values.len() / dim;
            Bag {
                id,
                label,
                instances: Array2::from_shape_vec((n, dim), values).expect("row lengths checked"),
                instance_labels: None,
            }
        })
        .collect();
    MilDataset::new(bags).map_err(|e| parse_err(path, 0, e.to_string()))
}

pub fn write_bags<W: Write>(ds: &MilDataset, writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    write!(w, "bag_id,label")?;
    for j in 0..ds.dim() {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for bag in ds.bags() {
        for row in bag.instances.rows() {
            write!(w, "{},{}", bag.id, bag.label)?;
            for v in row {
                // shortest representation that parses back to the same f64
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()
}

pub fn save_bags(ds: &MilDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_bags(ds, file).map_err(|e| Error::io(path, e))
}

/// Writes ground-truth instance labels as `bag_id,instance,label` rows.
pub fn save_truth(ds: &MilDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "bag_id,instance,label").map_err(io)?;
    for bag in ds.bags() {
        let truth = bag
            .instance_labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("bag `{}` has no instance labels", bag.id)))?;
        for (i, &t) in truth.iter().enumerate() {
            writeln!(w, "{},{},{}", bag.id, i, Label::from_bool(t)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Attaches instance labels written by [`save_truth`].
pub fn load_truth(ds: &MilDataset, path: impl AsRef<Path>) -> Result<MilDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut truth: HashMap<String, Vec<Option<bool>>> = ds
        .bags()
        .iter()
        .map(|b| (b.id.clone(), vec![None; b.len()]))
        .collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(parse_err(path, line, "expected bag_id,instance,label"));
        }
        let slots = truth
            .get_mut(&rec[0])
            .ok_or_else(|| parse_err(path, line, format!("unknown bag `{}`", &rec[0])))?;
        let idx: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(path, line, "instance index is not an integer"))?;
        let label = Label::parse(&rec[2]).ok_or_else(|| parse_err(path, line, "label is not -1 or 1"))?;
        let slot = slots
            .get_mut(idx)
            .ok_or_else(|| parse_err(path, line, format!("instance {idx} out of range")))?;
        *slot = Some(label.is_positive());
    }
    let bags = ds
        .bags()
        .iter()
        .map(|b| {
            let labels = truth.remove(&b.id).expect("seeded").into_iter().collect::<Option<Vec<bool>>>();
            labels
                .map(|l| Bag {
                    instance_labels: Some(l),
                    ..b.clone()
                })
                .ok_or_else(|| parse_err(path, 0, format!("bag `{}` is missing instance labels", b.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    MilDataset::new(bags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn read(s: &str) -> Result<MilDataset> {
        read_bags(s.as_bytes(), &PathBuf::from("mem.csv"))
    }

    #[test]
    fn two_rows_one_bag() {
        let ds = read("bag_id,label,f0,f1\nb1,1,0.5,2\nb1,1,1.5,-3\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.n_instances(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.bags()[0].label, Label::Positive);
    }

    #[test]
    fn grouping_preserves_first_appearance() {
        let ds = read("bag_id,label,f0\nb,-1,1\na,1,2\nb,-1,3\n").unwrap();
        let ids: Vec<_> = ds.bags().iter().map(|b| b.id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert_eq!(ds.bags()[0].instances, ndarray::array![[1.0], [3.0]]);
    }

    #[test]
    fn short_row_names_line() {
        let err = read("bag_id,label,f0,f1\nb1,1,0.5,2\nb1,1,1.5\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_names_line() {
        let err = read("bag_id,label,f0\nb1,1,0.5\nb2,-1,abc\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn conflicting_labels_rejected() {
        let err = read("bag_id,label,f0\nb1,1,0.5\nb1,-1,0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read("id,label,f0\nb1,1,0.5\n").is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_bags("/nonexistent/bags.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn mil_rule_enforced() {
        let bag = Bag {
            id: "x".into(),
            label: Label::Negative,
            instances: ndarray::array![[0.0], [1.0]],
            instance_labels: Some(vec![false, true]),
        };
        assert!(MilDataset::new(vec![bag]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = synth_generate(&SynthConfig {
            n_bags: 6,
            instances_per_bag: 3,
            dim: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bags.csv");
        let t = dir.path().join("truth.csv");
        save_bags(&ds, &p).unwrap();
        save_truth(&ds, &t).unwrap();
        let back = load_bags(&p).unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.bags().iter().zip(ds.bags()) {
            assert_eq!(a.instances, b.instances);
            assert_eq!(a.label, b.label);
        }
        let with_truth = load_truth(&back, &t).unwrap();
        assert_eq!(with_truth, ds);
    }
}
