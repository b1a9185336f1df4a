use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Requested split cardinalities. Pools default to exactly what is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub unpaired: usize,
    pub pretrain_lpet: usize,
    pub paired_train: usize,
    pub paired_eval: usize,
    pub unpaired_pool: Option<usize>,
    pub paired_pool: Option<usize>,
}

impl SplitConfig {
    pub fn new(
        unpaired: usize,
        pretrain_lpet: usize,
        paired_train: usize,
        paired_eval: usize,
    ) -> Self {
        Self {
            unpaired,
            pretrain_lpet,
            paired_train,
            paired_eval,
            unpaired_pool: None,
            paired_pool: None,
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::new(12, 3, 3, 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    UnpairedSpet,
    LpetPretrain,
    PairedTrain,
    PairedEval,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::UnpairedSpet,
        Role::LpetPretrain,
        Role::PairedTrain,
        Role::PairedEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::UnpairedSpet => "unpaired_spet",
            Role::LpetPretrain => "lpet_pretrain",
            Role::PairedTrain => "paired_train",
            Role::PairedEval => "paired_eval",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split role {s:?}")))
    }
}

/// Volume ids per role. LPET pretraining ids are drawn from the paired
/// training ids; evaluation ids never overlap training ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub unpaired_spet: Vec<String>,
    pub lpet_pretrain: Vec<String>,
    pub paired_train: Vec<String>,
    pub paired_eval: Vec<String>,
}

pub fn build_splits(cfg: &SplitConfig) -> Result<SplitManifest> {
    for (name, n) in [
        ("unpaired", cfg.unpaired),
        ("pretrain_lpet", cfg.pretrain_lpet),
        ("paired_train", cfg.paired_train),
        ("paired_eval", cfg.paired_eval),
    ] {
        if n == 0 {
            return Err(Error::config(format!(
                "split count {name} must be at least 1"
            )));
        }
    }
    if cfg.pretrain_lpet > cfg.paired_train {
        return Err(Error::config(format!(
            "{} LPET pretraining volumes requested but only {} paired training volumes",
            cfg.pretrain_lpet, cfg.paired_train
        )));
    }
    let unpaired_pool = cfg.unpaired_pool.unwrap_or(cfg.unpaired);
    if cfg.unpaired > unpaired_pool {
        return Err(Error::config(format!(
            "{} unpaired volumes requested from a pool of {unpaired_pool}",
            cfg.unpaired
        )));
    }
    let paired_needed = cfg.paired_train + cfg.paired_eval;
    let paired_pool = cfg.paired_pool.unwrap_or(paired_needed);
    if paired_needed > paired_pool {
        return Err(Error::config(format!(
            "{paired_needed} paired volumes requested from a pool of {paired_pool}"
        )));
    }
    let paired: Vec<String> = (0..paired_needed).map(|i| format!("p{i:04}")).collect();
    let paired_train = paired[..cfg.paired_train].to_vec();
    Ok(SplitManifest {
        unpaired_spet: (0..cfg.unpaired).map(|i| format!("u{i:04}")).collect(),
        lpet_pretrain: paired_train[..cfg.pretrain_lpet].to_vec(),
        paired_eval: paired[cfg.paired_train..].to_vec(),
        paired_train,
    })
}

impl SplitManifest {
    pub fn ids(&self, role: Role) -> &[String] {
        match role {
            Role::UnpairedSpet => &self.unpaired_spet,
            Role::LpetPretrain => &self.lpet_pretrain,
            Role::PairedTrain => &self.paired_train,
            Role::PairedEval => &self.paired_eval,
        }
    }

    fn ids_mut(&mut self, role: Role) -> &mut Vec<String> {
        match role {
            Role::UnpairedSpet => &mut self.unpaired_spet,
            Role::LpetPretrain => &mut self.lpet_pretrain,
            Role::PairedTrain => &mut self.paired_train,
            Role::PairedEval => &mut self.paired_eval,
        }
    }

    /// One `role<TAB>volume_id` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for role in Role::ALL {
            for id in self.ids(role) {
                out.push_str(&format!("{role}\t{id}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (role, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("manifest line {}: missing tab", n + 1)))?;
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!(
                    "manifest line {}: bad id {id:?}",
                    n + 1
                )));
            }
            m.ids_mut(role.parse()?).push(id.to_string());
        }
        m.check()?;
        Ok(m)
    }

    /// Train/eval disjointness and LPET pretraining ⊆ paired training.
    pub fn check(&self) -> Result<()> {
        if let Some(id) = self
            .paired_eval
            .iter()
            .find(|id| self.paired_train.contains(id))
        {
            return Err(Error::Invalid(format!(
                "{id} is in both paired_train and paired_eval"
            )));
        }
        if let Some(id) = self
            .lpet_pretrain
            .iter()
            .find(|id| !self.paired_train.contains(id))
        {
            return Err(Error::Invalid(format!(
                "lpet_pretrain id {id} is not a paired_train id"
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
