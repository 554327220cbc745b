use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Image,
    Patient,
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "image" => Ok(SplitMode::Image),
            "patient" => Ok(SplitMode::Patient),
            _ => Err(format!("unknown split mode {s:?}")),
        }
    }
}

/// Split of every manifest row, indexed like the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub splits: Vec<Split>,
    pub seed: u64,
    pub mode: SplitMode,
}

impl SplitAssignment {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == which).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.splits {
            c[*s as usize] += 1;
        }
        c
    }

    /// Writes `path,split` rows in manifest order.
    pub fn write_csv<W: std::io::Write>(&self, sink: W, samples: &[Sample]) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["path", "split"])?;
        for (s, split) in samples.iter().zip(&self.splits) {
            w.write_record([s.path.as_str(), split.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `path,split` CSV into a path → split map.
pub fn read_split_csv<R: std::io::Read>(source: R) -> Result<HashMap<String, Split>, DataError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "split"] {
        return Err(DataError::Manifest {
            row: 1,
            message: "split file header must be path,split".into(),
        });
    }
    let mut out = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let split = rec[1].parse().map_err(|message| DataError::Manifest { row: i + 2, message })?;
        out.insert(rec[0].to_string(), split);
    }
    Ok(out)
}

/// Parses `a:b:c` into three positive ratios.
pub fn parse_ratios(s: &str) -> Result<[f64; 3], DataError> {
    let parts: Vec<_> = s.split(':').map(|p| p.trim().parse::<f64>()).collect();
    match parts.as_slice() {
        [Ok(a), Ok(b), Ok(c)] if [a, b, c].iter().all(|v| v.is_finite() && **v > 0.0) => Ok([*a, *b, *c]),
        _ => Err(DataError::Split(format!("ratios must be three positive numbers like 7:1:2, got {s:?}"))),
    }
}

/// Random train/val/test assignment.
///
/// Image mode shuffles source images and cuts at `floor(r₁/Σ·n)` and
/// `floor((r₁+r₂)/Σ·n)`. Augmented variants (`<stem>__<aug>.png`) count as one
/// source so they always share a split; on an unaugmented manifest every row is
/// its own source. Patient mode shuffles patients and gives each whole patient to
/// the split with the smallest `count / ratio`, ties to the earlier split.
pub fn split_dataset(samples: &[Sample], ratios: [f64; 3], seed: u64, mode: SplitMode) -> Result<SplitAssignment, DataError> {
    if samples.is_empty() {
        return Err(DataError::Split("cannot split an empty manifest".into()));
    }
    if !ratios.iter().all(|r| r.is_finite() && *r > 0.0) {
        return Err(DataError::Split(format!("ratios must be positive, got {ratios:?}")));
    }
    let key = |s: &Sample| -> String {
        match mode {
            SplitMode::Image => s.source_key().to_string(),
            SplitMode::Patient => s.patient_id.clone(),
        }
    };
    let mut groups: Vec<String> = Vec::new();
    let mut group_of = Vec::with_capacity(samples.len());
    let mut seen = HashMap::new();
    for s in samples {
        let k = key(s);
        let g = *seen.entry(k.clone()).or_insert_with(|| {
            groups.push(k);
            groups.len() - 1
        });
        group_of.push(g);
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut group_split = vec![Split::Train; groups.len()];
    match mode {
        SplitMode::Image => {
            let n = groups.len() as f64;
            let total: f64 = ratios.iter().sum();
            let cut1 = (ratios[0] / total * n + 1e-9).floor() as usize;
            let cut2 = ((ratios[0] + ratios[1]) / total * n + 1e-9).floor() as usize;
            for (pos, &g) in order.iter().enumerate() {
                group_split[g] = if pos < cut1 {
                    Split::Train
                } else if pos < cut2 {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
        SplitMode::Patient => {
            let mut sizes = vec![0usize; groups.len()];
            for &g in &group_of {
                sizes[g] += 1;
            }
            let mut filled = [0usize; 3];
            for &g in &order {
                let mut best = 0;
                for s in 1..3 {
                    if (filled[s] as f64) / ratios[s] < (filled[best] as f64) / ratios[best] {
                        best = s;
                    }
                }
                filled[best] += sizes[g];
                group_split[g] = Split::ALL[best];
            }
        }
    }
    Ok(SplitAssignment {
        splits: group_of.iter().map(|&g| group_split[g]).collect(),
        seed,
        mode,
    })
}
