use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Dataset};

pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.25, 0.25];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "validation" | "val" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(format!(
                "unknown partition \"{other}\" (expected train, validation or test)"
            )),
        }
    }
}

/// Disjoint train/validation/test partition of article ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub stratified: bool,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSet {
    pub fn ids(&self, partition: Partition) -> &[String] {
        match partition {
            Partition::Train => &self.train,
            Partition::Validation => &self.validation,
            Partition::Test => &self.test,
        }
    }

    /// Pretty JSON manifest; byte-identical for identical splits.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }
}

fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

fn sizes(n: usize, ratios: [f64; 3]) -> (usize, usize) {
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999…
    let n_train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    (n_train.min(n), n_val.min(n - n_train.min(n)))
}

/// Seeded Fisher–Yates split: `floor(r₁n)` train, `floor(r₂n)` validation,
/// the remainder test. With `stratify` the rule applies within each category
/// and the per-category pieces are concatenated in label order.
pub fn split(dataset: &Dataset, seed: u64, ratios: [f64; 3], stratify: bool) -> Result<SplitSet, CorpusError> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<String>> = if stratify {
        let labels = dataset.label_ids()?;
        let mut groups = vec![Vec::new(); dataset.labels().len()];
        for (a, l) in dataset.articles().iter().zip(labels) {
            groups[l].push(a.id.clone());
        }
        groups
    } else {
        vec![dataset.articles().iter().map(|a| a.id.clone()).collect()]
    };
    let mut out = SplitSet {
        seed,
        ratios,
        stratified: stratify,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for mut ids in groups {
        fisher_yates(&mut ids, &mut rng);
        let (n_train, n_val) = sizes(ids.len(), ratios);
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        out.train.extend(ids);
        out.validation.extend(val);
        out.test.extend(test);
    }
    Ok(out)
}
