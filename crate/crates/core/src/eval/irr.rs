//! Agreement between annotators: exact overlap and Krippendorff's alpha.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Nominal,
    Ordinal,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(Level::Nominal),
            "ordinal" => Ok(Level::Ordinal),
            other => Err(Error::invalid(format!("unknown measurement level `{other}`"))),
        }
    }
}

/// Items × raters; `None` marks a missing rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub ratings: Vec<Vec<Option<i64>>>,
}

impl RatingMatrix {
    pub fn new(ratings: Vec<Vec<Option<i64>>>) -> Result<Self> {
        let raters = ratings.first().map(Vec::len).unwrap_or(0);
        if ratings.is_empty() {
            return Err(Error::invalid("rating matrix has no items"));
        }
        if raters < 2 {
            return Err(Error::invalid("agreement needs at least two raters"));
        }
        if ratings.iter().any(|r| r.len() != raters) {
            return Err(Error::invalid("every item needs one entry per rater"));
        }
        Ok(RatingMatrix { ratings })
    }

    pub fn complete(ratings: &[&[i64]]) -> Result<Self> {
        Self::new(ratings.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect())
    }

    /// CSV with one row per item and one column per rater; empty cells are
    /// missing. A header row is skipped when its first cell is not numeric.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::invalid(format!("ratings csv: {e}")))?;
            if i == 0 && rec.get(0).is_some_and(|c| !c.trim().is_empty() && c.trim().parse::<i64>().is_err()) {
                continue;
            }
            let row = rec
                .iter()
                .map(|c| {
                    let c = c.trim();
                    if c.is_empty() || c.eq_ignore_ascii_case("na") {
                        Ok(None)
                    } else {
                        c.parse::<i64>().map(Some).map_err(|_| Error::invalid(format!("ratings csv row {}: `{c}` is not an integer", i + 1)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let rows: Vec<Vec<Option<i64>>> = serde_json::from_str(&text)?;
            Self::new(rows)
        } else {
            Self::from_csv(&text)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub overlap: f64,
    pub alpha: f64,
    /// Items that entered the computation (all-missing items are ignored).
    pub items: usize,
}

/// Fraction of items on which every rater gave the same label. Items with
/// some rating missing are an error; all-missing items are skipped.
pub fn overlap(m: &RatingMatrix) -> Result<f64> {
    let mut agree = 0usize;
    let mut total = 0usize;
    for (i, row) in m.ratings.iter().enumerate() {
        if row.iter().all(Option::is_none) {
            continue;
        }
        if row.iter().any(Option::is_none) {
            return Err(Error::invalid(format!("item {i} has missing ratings; overlap needs complete items")));
        }
        total += 1;
        agree += usize::from(row.windows(2).all(|w| w[0] == w[1]));
    }
    if total == 0 {
        return Err(Error::invalid("no rated items"));
    }
    Ok(agree as f64 / total as f64)
}

/// Krippendorff's alpha from the coincidence matrix. Items with fewer than
/// two ratings are not pairable and are ignored. With a single category in
/// use there is no expected disagreement and alpha is 1.
pub fn krippendorff_alpha(m: &RatingMatrix, level: Level) -> Result<f64> {
    let mut categories: Vec<i64> = m.ratings.iter().flatten().flatten().copied().collect();
    categories.sort_unstable();
    categories.dedup();
    let index: BTreeMap<i64, usize> = categories.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let q = categories.len();
    let mut o = vec![vec![0.0; q]; q];
    for row in &m.ratings {
        let vals: Vec<usize> = row.iter().flatten().map(|v| index[v]).collect();
        let mu = vals.len();
        if mu < 2 {
            continue;
        }
        for a in 0..mu {
            for b in 0..mu {
                if a != b {
                    o[vals[a]][vals[b]] += 1.0 / (mu - 1) as f64;
                }
            }
        }
    }
    let nc: Vec<f64> = o.iter().map(|r| r.iter().sum()).collect();
    let n: f64 = nc.iter().sum();
    if n == 0.0 {
        return Err(Error::invalid("no pairable ratings"));
    }
    let delta = |c: usize, k: usize| -> f64 {
        match level {
            Level::Nominal => f64::from(u8::from(c != k)),
            Level::Ordinal => {
                let (lo, hi) = (c.min(k), c.max(k));
                let between: f64 = nc[lo..=hi].iter().sum();
                (between - (nc[c] + nc[k]) / 2.0).powi(2)
            }
        }
    };
    let (mut d_o, mut d_e) = (0.0, 0.0);
    for c in 0..q {
        for k in 0..q {
            let d = delta(c, k);
            d_o += o[c][k] * d;
            d_e += nc[c] * nc[k] * d;
        }
    }
    if d_e == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * d_o / d_e)
}

pub fn irr_metrics(m: &RatingMatrix, level: Level) -> Result<Agreement> {
    Ok(Agreement {
        overlap: overlap(m)?,
        alpha: krippendorff_alpha(m, level)?,
        items: m.ratings.iter().filter(|r| r.iter().any(Option::is_some)).count(),
    })
}
