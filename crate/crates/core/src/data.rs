//! Hierarchical observation data: role bindings, community partition,
//! weights, and community-level aggregation.

use crate::error::{Error, Result};
use crate::frame::Frame;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Column role bindings. `anodes` and `wenodes` are required; the rest are
/// optional. All bound columns except the community id must be numeric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRoles {
    pub ynode: Option<String>,
    pub anodes: Vec<String>,
    pub wenodes: Vec<String>,
    pub community_id: Option<String>,
    pub ynode_det: Option<String>,
}

impl NodeRoles {
    pub fn validate(&self) -> Result<()> {
        if self.anodes.is_empty() {
            return Err(Error::config("anodes must not be empty"));
        }
        if self.wenodes.is_empty() {
            return Err(Error::config("wenodes must not be empty"));
        }
        for a in &self.anodes {
            if self.wenodes.contains(a) {
                return Err(Error::config(format!(
                    "column `{a}` bound to both anodes and wenodes"
                )));
            }
            if self.ynode.as_deref() == Some(a) {
                return Err(Error::config(format!(
                    "column `{a}` bound to both ynode and anodes"
                )));
            }
        }
        if let Some(y) = &self.ynode {
            if self.wenodes.contains(y) {
                return Err(Error::config(format!(
                    "column `{y}` bound to both ynode and wenodes"
                )));
            }
        }
        let mut seen = Vec::new();
        for c in self.anodes.iter().chain(self.wenodes.iter()) {
            if seen.contains(&c) {
                return Err(Error::config(format!("column `{c}` bound twice")));
            }
            seen.push(c);
        }
        Ok(())
    }

    /// All numeric role columns, in a stable order.
    pub fn numeric_columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = Vec::new();
        if let Some(y) = &self.ynode {
            cols.push(y);
        }
        cols.extend(self.anodes.iter().map(String::as_str));
        cols.extend(self.wenodes.iter().map(String::as_str));
        if let Some(d) = &self.ynode_det {
            cols.push(d);
        }
        cols
    }
}

/// One community: stable key plus member row indices (in file order).
#[derive(Debug, Clone)]
pub struct Community {
    pub key: String,
    pub rows: Vec<usize>,
}

impl Community {
    pub fn size(&self) -> usize {
        self.rows.len()
    }
}

/// Validated rectangular dataset with role bindings and a community
/// partition. Communities are ordered by first appearance; when no
/// community id is bound every row is its own community of size 1.
#[derive(Debug, Clone)]
pub struct HierDataset {
    frame: Frame,
    roles: NodeRoles,
    communities: Vec<Community>,
}

impl HierDataset {
    pub fn new(frame: Frame, roles: NodeRoles, keys: Option<Vec<String>>) -> Result<Self> {
        roles.validate()?;
        for col in roles.numeric_columns() {
            let v = frame.try_column(col)?;
            if let Some(i) = v.iter().position(|x| x.is_nan()) {
                return Err(Error::data(format!("NaN in column `{col}` at row {i}")));
            }
        }
        if let Some(det) = &roles.ynode_det {
            let v = frame.try_column(det)?;
            if let Some(i) = v.iter().position(|x| *x != 0.0 && *x != 1.0) {
                return Err(Error::data(format!(
                    "ynode_det column `{det}` must be 0/1, row {i} is {}",
                    v[i]
                )));
            }
        }

        let communities = match keys {
            Some(keys) => {
                if keys.len() != frame.n_rows() {
                    return Err(Error::data("community key length mismatch"));
                }
                let mut comms: Vec<Community> = Vec::new();
                let mut index: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
                for (row, key) in keys.iter().enumerate() {
                    match index.get(key.as_str()) {
                        Some(&j) => comms[j].rows.push(row),
                        None => {
                            index.insert(key.as_str(), comms.len());
                            comms.push(Community {
                                key: key.clone(),
                                rows: vec![row],
                            });
                        }
                    }
                }
                comms
            }
            None => (0..frame.n_rows())
                .map(|i| Community {
                    key: i.to_string(),
                    rows: vec![i],
                })
                .collect(),
        };
        if frame.n_rows() == 0 {
            return Err(Error::data("dataset has no rows"));
        }
        Ok(HierDataset {
            frame,
            roles,
            communities,
        })
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn roles(&self) -> &NodeRoles {
        &self.roles
    }

    pub fn communities(&self) -> &[Community] {
        &self.communities
    }

    pub fn n_obs(&self) -> usize {
        self.frame.n_rows()
    }

    pub fn n_communities(&self) -> usize {
        self.communities.len()
    }

    pub fn has_hierarchy(&self) -> bool {
        self.roles.community_id.is_some()
    }

    /// Community index of each row.
    pub fn community_of_row(&self) -> Vec<usize> {
        let mut idx = vec![0usize; self.n_obs()];
        for (j, c) in self.communities.iter().enumerate() {
            for &r in &c.rows {
                idx[r] = j;
            }
        }
        idx
    }

    pub fn ynode(&self) -> Result<&str> {
        self.roles
            .ynode
            .as_deref()
            .ok_or_else(|| Error::config("ynode is required for estimation"))
    }

    /// Deterministic-outcome mask per row (all false when unbound).
    pub fn det_mask(&self) -> Vec<bool> {
        match &self.roles.ynode_det {
            Some(d) => self
                .frame
                .column(d)
                .map(|v| v.iter().map(|&x| x == 1.0).collect())
                .unwrap_or_else(|| vec![false; self.n_obs()]),
            None => vec![false; self.n_obs()],
        }
    }

    /// Load from a headered CSV. Role columns are parsed as numbers (with a
    /// row-indexed error on failure); the community id column is kept as a
    /// string key, with integral floats normalized so `3` and `3.0` match.
    pub fn load_csv(path: impl AsRef<Path>, roles: NodeRoles) -> Result<Self> {
        roles.validate()?;
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();

        let mut want: Vec<&str> = roles.numeric_columns();
        if let Some(id) = &roles.community_id {
            want.push(id);
        }
        for col in &want {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::data(format!(
                    "role column `{col}` not found in CSV header"
                )));
            }
        }

        let numeric: Vec<(usize, String)> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| roles.numeric_columns().contains(&h.as_str()))
            .map(|(i, h)| (i, h.clone()))
            .collect();
        let id_pos = roles
            .community_id
            .as_ref()
            .map(|id| headers.iter().position(|h| h == id).unwrap());

        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); numeric.len()];
        let mut keys: Vec<String> = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (slot, (pos, name)) in numeric.iter().enumerate() {
                let raw = rec.get(*pos).unwrap_or("");
                let val: f64 = raw.trim().parse().map_err(|_| {
                    Error::data(format!(
                        "non-numeric value `{raw}` in column `{name}` at row {row}"
                    ))
                })?;
                cols[slot].push(val);
            }
            if let Some(pos) = id_pos {
                keys.push(normalize_key(rec.get(pos).unwrap_or("").trim()));
            }
        }

        let mut frame = Frame::new();
        for ((_, name), values) in numeric.into_iter().zip(cols) {
            frame.push_column(name, values)?;
        }
        let keys = if id_pos.is_some() { Some(keys) } else { None };
        HierDataset::new(frame, roles, keys)
    }

    /// Write the bound columns back out as CSV. Values are printed with
    /// shortest round-trip formatting, so a reload reproduces them exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::fs::File::create(path.as_ref())?;
        let mut header: Vec<String> = self
            .roles
            .numeric_columns()
            .iter()
            .map(|s| s.to_string())
            .collect();
        if let Some(id) = &self.roles.community_id {
            header.push(id.clone());
        }
        writeln!(out, "{}", header.join(","))?;
        let keys = self.row_keys();
        for row in 0..self.n_obs() {
            let mut cells: Vec<String> = self
                .roles
                .numeric_columns()
                .iter()
                .map(|c| format!("{}", self.frame.column(c).unwrap()[row]))
                .collect();
            if self.roles.community_id.is_some() {
                cells.push(keys[row].clone());
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    fn row_keys(&self) -> Vec<String> {
        let mut keys = vec![String::new(); self.n_obs()];
        for c in &self.communities {
            for &r in &c.rows {
                keys[r] = c.key.clone();
            }
        }
        keys
    }

    /// Restrict to a single community, dropping the hierarchy.
    pub fn community_subset(&self, j: usize) -> Result<HierDataset> {
        let community = self
            .communities
            .get(j)
            .ok_or_else(|| Error::data("community index out of range"))?;
        let frame = self.frame.select_rows(&community.rows);
        let mut roles = self.roles.clone();
        roles.community_id = None;
        HierDataset::new(frame, roles, None)
    }
}

fn normalize_key(raw: &str) -> String {
    if let Ok(v) = raw.parse::<f64>() {
        if v.fract() == 0.0 && v.abs() < 1e15 {
            return format!("{}", v as i64);
        }
    }
    raw.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsWeightPolicy {
    EqualWithinPop,
    EqualWithinCommunity,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommunityWeightPolicy {
    SizeCommunity,
    EqualCommunity,
    User,
}

/// Resolved observation- and community-level weights.
#[derive(Debug, Clone)]
pub struct WeightScheme {
    pub obs_weights: Vec<f64>,
    pub community_weights: Vec<f64>,
    pub obs_policy: ObsWeightPolicy,
    pub community_policy: CommunityWeightPolicy,
}

impl WeightScheme {
    /// Per-row alpha weights: observation weights renormalized within each
    /// community to sum to 1.
    pub fn alpha(&self, ds: &HierDataset) -> Result<Vec<f64>> {
        let mut alpha = vec![0.0; ds.n_obs()];
        for c in ds.communities() {
            let total: f64 = c.rows.iter().map(|&r| self.obs_weights[r]).sum();
            if total <= 0.0 {
                return Err(Error::data(format!(
                    "community `{}` has no positive observation weight",
                    c.key
                )));
            }
            for &r in &c.rows {
                alpha[r] = self.obs_weights[r] / total;
            }
        }
        Ok(alpha)
    }
}

/// Resolve weight policies to concrete vectors.
///
/// `size_community` weights community j proportionally to its size N_j,
/// rescaled by the standard deviation of the sizes (relative weights are
/// what matter downstream; the rescaling just keeps magnitudes tame).
pub fn build_weights(
    ds: &HierDataset,
    obs_policy: ObsWeightPolicy,
    community_policy: CommunityWeightPolicy,
    user_obs: Option<Vec<f64>>,
    user_community: Option<Vec<f64>>,
) -> Result<WeightScheme> {
    let obs_weights = match obs_policy {
        ObsWeightPolicy::EqualWithinPop => vec![1.0; ds.n_obs()],
        ObsWeightPolicy::EqualWithinCommunity => {
            let mut w = vec![0.0; ds.n_obs()];
            for c in ds.communities() {
                let v = 1.0 / c.size() as f64;
                for &r in &c.rows {
                    w[r] = v;
                }
            }
            w
        }
        ObsWeightPolicy::User => {
            let w = user_obs
                .ok_or_else(|| Error::config("obs weight policy `user` needs a weight vector"))?;
            if w.len() != ds.n_obs() {
                return Err(Error::data(format!(
                    "user obs weights have length {}, expected {}",
                    w.len(),
                    ds.n_obs()
                )));
            }
            w
        }
    };
    if let Some(i) = obs_weights.iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::data(format!("negative observation weight at row {i}")));
    }
    for c in ds.communities() {
        if !c.rows.iter().any(|&r| obs_weights[r] > 0.0) {
            return Err(Error::data(format!(
                "community `{}` has all-zero observation weights",
                c.key
            )));
        }
    }

    let j = ds.n_communities();
    let community_weights = match community_policy {
        CommunityWeightPolicy::SizeCommunity => {
            let sizes: Vec<f64> = ds.communities().iter().map(|c| c.size() as f64).collect();
            let sd = if j > 1 {
                let mean = sizes.iter().sum::<f64>() / j as f64;
                (sizes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (j - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            if sd > 0.0 {
                sizes.iter().map(|s| s / sd).collect()
            } else {
                sizes
            }
        }
        CommunityWeightPolicy::EqualCommunity => vec![1.0; j],
        CommunityWeightPolicy::User => {
            let w = user_community.ok_or_else(|| {
                Error::config("community weight policy `user` needs a weight vector")
            })?;
            if w.len() != j {
                return Err(Error::data(format!(
                    "user community weights have length {}, expected {}",
                    w.len(),
                    j
                )));
            }
            w
        }
    };
    if let Some(i) = community_weights
        .iter()
        .position(|&v| v < 0.0 || !v.is_finite())
    {
        return Err(Error::data(format!(
            "negative weight for community `{}`",
            ds.communities()[i].key
        )));
    }
    if !community_weights.iter().any(|&v| v > 0.0) {
        return Err(Error::data("all community weights are zero"));
    }

    Ok(WeightScheme {
        obs_weights,
        community_weights,
        obs_policy,
        community_policy,
    })
}

/// Community-level aggregate: one row per community. Exposures must be
/// constant within each community and are copied; every other bound numeric
/// column (outcome and covariates alike) is replaced by its alpha-weighted
/// within-community mean.
pub fn aggregate_to_community(ds: &HierDataset, weights: &WeightScheme) -> Result<Frame> {
    let alpha = weights.alpha(ds)?;
    for a in &ds.roles().anodes {
        let col = ds.frame().try_column(a)?;
        for c in ds.communities() {
            let first = col[c.rows[0]];
            if c.rows.iter().any(|&r| col[r] != first) {
                return Err(Error::data(format!(
                    "exposure `{a}` varies within community `{}`",
                    c.key
                )));
            }
        }
    }

    let mut out = Frame::new();
    for col_name in ds.roles().numeric_columns() {
        let col = ds.frame().try_column(col_name)?;
        let is_anode = ds.roles().anodes.iter().any(|a| a == col_name);
        let values: Vec<f64> = ds
            .communities()
            .iter()
            .map(|c| {
                if is_anode {
                    col[c.rows[0]]
                } else {
                    c.rows.iter().map(|&r| alpha[r] * col[r]).sum()
                }
            })
            .collect();
        out.push_column(col_name, values)?;
    }
    Ok(out)
}
