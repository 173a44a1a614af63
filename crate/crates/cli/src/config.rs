//! Run-configuration files (TOML or JSON) and their resolution into the
//! library's estimation inputs. Unknown keys are rejected.

use hiertmle::data::{CommunityWeightPolicy, ObsWeightPolicy};
use hiertmle::density::{BinMethod, BinningConfig, DEFAULT_LBOUND};
use hiertmle::formula::Term;
use hiertmle::intervention::{InterventionKind, InterventionSpec, MeanModel, SamplerSpec};
use hiertmle::sim::{Arm, DgpSpec, Study};
use hiertmle::{
    CommunityStep, Error, EstimationConfig, Formula, HierDataset, McConfig, NodeRoles, Result,
    StrategyConfig, TargetMethod,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn parse_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
        }
        _ => toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display()))),
    }
}

/// Observation-weight setting: a named policy or an explicit vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObsWeightsConfig {
    Policy(String),
    Vector(Vec<f64>),
}

/// Community-weight setting: a named policy or `[key, weight]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CommunityWeightsConfig {
    Policy(String),
    Pairs(Vec<(String, f64)>),
}

/// Built-in sampler description (string-keyed, formula-style terms).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub sampler: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunc_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_intercept: Option<f64>,
    /// Term/coefficient pairs; a term is a column name or `a:b` product.
    /// Evaluated on within-community means.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_terms: Option<Vec<(String, f64)>>,
    /// Term/coefficient pairs evaluated on dataset-wide means.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_terms_grand: Option<Vec<(String, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_frac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
}

/// Intervention setting: a constant, an explicit exposure vector, or a
/// sampler description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InterventionConfig {
    Constant(f64),
    Vector(Vec<f64>),
    Sampler(SamplerConfig),
}

fn parse_term(s: &str) -> Result<Term> {
    if let Some((a, b)) = s.split_once(':') {
        Ok(Term::Interaction(a.trim().to_string(), b.trim().to_string()))
    } else {
        Ok(Term::Main(s.trim().to_string()))
    }
}

impl InterventionConfig {
    pub fn resolve(&self, name: &str, ds: &HierDataset) -> Result<InterventionSpec> {
        let n_anodes = ds.roles().anodes.len();
        let kind = match self {
            InterventionConfig::Constant(v) => {
                InterventionKind::Constant { values: vec![*v; n_anodes] }
            }
            InterventionConfig::Vector(v) => {
                if v.len() == ds.n_obs() {
                    InterventionKind::Table { columns: vec![v.clone()] }
                } else if v.len() == n_anodes {
                    InterventionKind::Constant { values: v.clone() }
                } else {
                    return Err(Error::config(format!(
                        "intervention `{name}` vector has length {}, expected {} (per-exposure) or {} (per-row)",
                        v.len(),
                        n_anodes,
                        ds.n_obs()
                    )));
                }
            }
            InterventionConfig::Sampler(sc) => match sc.sampler.as_str() {
                "shift_truncate" => {
                    let parse_terms = |src: &Option<Vec<(String, f64)>>| {
                        src.clone()
                            .unwrap_or_default()
                            .iter()
                            .map(|(t, c)| Ok((parse_term(t)?, *c)))
                            .collect::<Result<Vec<_>>>()
                    };
                    InterventionKind::Sampler(SamplerSpec::ShiftTruncate {
                        shift: sc
                            .shift
                            .ok_or_else(|| Error::config("shift_truncate needs `shift`"))?,
                        trunc_bound: sc
                            .trunc_bound
                            .ok_or_else(|| Error::config("shift_truncate needs `trunc_bound`"))?,
                        mean: MeanModel {
                            intercept: sc.mean_intercept.unwrap_or(0.0),
                            terms: parse_terms(&sc.mean_terms)?,
                            grand_terms: parse_terms(&sc.mean_terms_grand)?,
                        },
                        sd: sc.sd.unwrap_or(1.0),
                        ratio_scale: sc.ratio_scale.unwrap_or(0.5),
                        ratio_frac: sc.ratio_frac.unwrap_or(0.5),
                    })
                }
                "bernoulli" => InterventionKind::Sampler(SamplerSpec::Bernoulli {
                    prob: sc
                        .prob
                        .ok_or_else(|| Error::config("bernoulli sampler needs `prob`"))?,
                }),
                other => {
                    return Err(Error::config(format!("unknown sampler `{other}`")));
                }
            },
        };
        Ok(InterventionSpec {
            name: name.to_string(),
            kind,
        })
    }
}

/// The `estimate` command's configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ynode: Option<String>,
    pub anodes: Vec<String>,
    pub wenodes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub community_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ynode_det: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub community_step: Option<CommunityStep>,
    #[serde(default)]
    pub pooled_q: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_wts: Option<ObsWeightsConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub community_wts: Option<CommunityWeightsConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_gstar1: Option<InterventionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_gstar2: Option<InterventionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_g0: Option<InterventionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qform: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hform_g0: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hform_gstar: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qbounds: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_method: Option<BinMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nbins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maxncats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_n_per_bin: Option<usize>,
    #[serde(default)]
    pub pool_contin_var: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lbound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmle_target_step: Option<TargetMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mc_sims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub savetime_fit_hbars: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub verbose: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse_g0: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse_gstar1: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reuse_gstar2: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_file(path)
    }

    pub fn roles(&self) -> NodeRoles {
        NodeRoles {
            ynode: self.ynode.clone(),
            anodes: self.anodes.clone(),
            wenodes: self.wenodes.clone(),
            community_id: self.community_id.clone(),
            ynode_det: self.ynode_det.clone(),
        }
    }

    /// Fill every default so the echoed document fully determines the run.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.community_step = Some(c.community_step.unwrap_or(CommunityStep::NoCommunity));
        c.alpha = Some(c.alpha.unwrap_or(0.995));
        c.bin_method = Some(c.bin_method.unwrap_or(BinMethod::EqualMass));
        c.maxncats = Some(c.maxncats.unwrap_or(10));
        c.max_n_per_bin = Some(c.max_n_per_bin.unwrap_or(500));
        c.lbound = Some(c.lbound.unwrap_or(DEFAULT_LBOUND));
        c.tmle_target_step = Some(c.tmle_target_step.unwrap_or(TargetMethod::TmleIntercept));
        c.n_mc_sims = Some(c.n_mc_sims.unwrap_or(1));
        c.ci_alpha = Some(c.ci_alpha.unwrap_or(0.05));
        c.savetime_fit_hbars = Some(c.savetime_fit_hbars.unwrap_or(true));
        c.seed = Some(c.seed.unwrap_or(0));
        if c.obs_wts.is_none() {
            c.obs_wts = Some(ObsWeightsConfig::Policy("equal.within.pop".into()));
        }
        if c.community_wts.is_none() {
            c.community_wts = Some(CommunityWeightsConfig::Policy("size.community".into()));
        }
        c
    }

    pub fn strategy(&self) -> StrategyConfig {
        StrategyConfig {
            step: self.community_step.unwrap_or(CommunityStep::NoCommunity),
            pooled_q: self.pooled_q,
        }
    }

    pub fn obs_policy(&self, ds: &HierDataset) -> Result<(ObsWeightPolicy, Option<Vec<f64>>)> {
        match &self.obs_wts {
            None => Ok((ObsWeightPolicy::EqualWithinPop, None)),
            Some(ObsWeightsConfig::Policy(p)) => match p.as_str() {
                "equal.within.pop" => Ok((ObsWeightPolicy::EqualWithinPop, None)),
                "equal.within.community" => Ok((ObsWeightPolicy::EqualWithinCommunity, None)),
                other => Err(Error::config(format!("unknown obs_wts policy `{other}`"))),
            },
            Some(ObsWeightsConfig::Vector(v)) => {
                let _ = ds;
                Ok((ObsWeightPolicy::User, Some(v.clone())))
            }
        }
    }

    pub fn community_policy(
        &self,
        ds: &HierDataset,
    ) -> Result<(CommunityWeightPolicy, Option<Vec<f64>>)> {
        match &self.community_wts {
            None => Ok((CommunityWeightPolicy::SizeCommunity, None)),
            Some(CommunityWeightsConfig::Policy(p)) => match p.as_str() {
                "size.community" => Ok((CommunityWeightPolicy::SizeCommunity, None)),
                "equal.community" => Ok((CommunityWeightPolicy::EqualCommunity, None)),
                other => Err(Error::config(format!(
                    "unknown community_wts policy `{other}`"
                ))),
            },
            Some(CommunityWeightsConfig::Pairs(pairs)) => {
                let mut w = vec![f64::NAN; ds.n_communities()];
                for (key, weight) in pairs {
                    match ds.communities().iter().position(|c| &c.key == key) {
                        Some(j) => w[j] = *weight,
                        None => {
                            return Err(Error::data(format!(
                                "community weight given for unknown community `{key}`"
                            )))
                        }
                    }
                }
                if let Some(j) = w.iter().position(|v| v.is_nan()) {
                    return Err(Error::data(format!(
                        "no weight given for community `{}`",
                        ds.communities()[j].key
                    )));
                }
                Ok((CommunityWeightPolicy::User, Some(w)))
            }
        }
    }

    /// Assemble the library-level estimation config.
    pub fn estimation_config(&self, ds: &HierDataset) -> Result<EstimationConfig> {
        let mut interventions = Vec::new();
        if let Some(g1) = &self.f_gstar1 {
            interventions.push(g1.resolve("gstar1", ds)?);
        }
        if let Some(g2) = &self.f_gstar2 {
            if self.f_gstar1.is_none() {
                return Err(Error::config("f_gstar2 requires f_gstar1"));
            }
            interventions.push(g2.resolve("gstar2", ds)?);
        }
        let f_g0 = self
            .f_g0
            .as_ref()
            .map(|c| c.resolve("g0", ds))
            .transpose()?;

        let parse_formula = |s: &Option<String>| -> Result<Option<Formula>> {
            s.as_ref().map(|f| Formula::parse(f)).transpose()
        };

        let reuse = |p: &Option<PathBuf>| -> Result<Option<hiertmle::FittedDensity>> {
            match p {
                None => Ok(None),
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    Ok(Some(hiertmle::FittedDensity::from_json(&text)?))
                }
            }
        };

        Ok(EstimationConfig {
            interventions,
            f_g0,
            qform: parse_formula(&self.qform)?,
            hform_g0: parse_formula(&self.hform_g0)?,
            hform_gstar: parse_formula(&self.hform_gstar)?,
            qbounds: self.qbounds,
            alpha: self.alpha.unwrap_or(0.995),
            binning: BinningConfig {
                method: self.bin_method.unwrap_or(BinMethod::EqualMass),
                nbins: self.nbins,
                maxncats: self.maxncats.unwrap_or(10),
                max_n_per_bin: self.max_n_per_bin.unwrap_or(500),
                pool_contin_var: self.pool_contin_var,
            },
            lbound: self.lbound.unwrap_or(DEFAULT_LBOUND),
            target: self.tmle_target_step.unwrap_or(TargetMethod::TmleIntercept),
            mc: McConfig {
                n_sims: self.n_mc_sims.unwrap_or(1),
                seed: self.seed.unwrap_or(0),
            },
            ci_alpha: self.ci_alpha.unwrap_or(0.05),
            savetime: self.savetime_fit_hbars.unwrap_or(true),
            reuse_g0: reuse(&self.reuse_g0)?,
            reuse_gstar: vec![reuse(&self.reuse_gstar1)?, reuse(&self.reuse_gstar2)?],
        })
    }
}

/// The `density-fit` command's configuration document. Hierarchy is not
/// supported here: this entry point fits a plain multivariate conditional
/// density on the observation rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub data: PathBuf,
    pub anodes: Vec<String>,
    pub wenodes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gform: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_gstar: Option<InterventionConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bin_method: Option<BinMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nbins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maxncats: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_n_per_bin: Option<usize>,
    #[serde(default)]
    pub pool_contin_var: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lbound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mc_sims: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DensityConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_file(path)
    }

    pub fn roles(&self) -> NodeRoles {
        NodeRoles {
            ynode: None,
            anodes: self.anodes.clone(),
            wenodes: self.wenodes.clone(),
            community_id: None,
            ynode_det: None,
        }
    }

    pub fn binning(&self) -> BinningConfig {
        BinningConfig {
            method: self.bin_method.unwrap_or(BinMethod::EqualMass),
            nbins: self.nbins,
            maxncats: self.maxncats.unwrap_or(10),
            max_n_per_bin: self.max_n_per_bin.unwrap_or(500),
            pool_contin_var: self.pool_contin_var,
        }
    }

    pub fn resolved(&self) -> DensityConfig {
        let mut c = self.clone();
        c.bin_method = Some(c.bin_method.unwrap_or(BinMethod::EqualMass));
        c.maxncats = Some(c.maxncats.unwrap_or(10));
        c.max_n_per_bin = Some(c.max_n_per_bin.unwrap_or(500));
        c.lbound = Some(c.lbound.unwrap_or(DEFAULT_LBOUND));
        c.n_mc_sims = Some(c.n_mc_sims.unwrap_or(1));
        c.seed = Some(c.seed.unwrap_or(0));
        c
    }
}

/// The `simulate` command's configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub study: Study,
    /// Communities (observations for the N=1 study).
    pub j: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub working_model: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trunc_bound: Option<f64>,
    pub replications: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Known truth; omitted means calibrate by Monte Carlo.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub battery: Option<Vec<Arm>>,
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<Self> {
        parse_file(path)
    }

    pub fn dgp(&self) -> DgpSpec {
        let seed = self.seed.unwrap_or(0);
        let mut dgp = match self.study {
            Study::Sim1Stoch => DgpSpec::sim1(self.j, self.working_model.unwrap_or(true), seed),
            Study::Sim2Static => DgpSpec::sim2(self.j, self.working_model.unwrap_or(true), seed),
            Study::Sim3N1 => DgpSpec::sim3(self.j, seed),
        };
        if let Some(n) = self.n_mean {
            dgp.n_mean = n;
        }
        if let Some(s) = self.shift {
            dgp.shift = s;
        }
        if let Some(b) = self.trunc_bound {
            dgp.trunc_bound = b;
        }
        dgp
    }

    pub fn resolved(&self) -> SimConfig {
        let mut c = self.clone();
        let dgp = self.dgp();
        c.n_mean = Some(dgp.n_mean);
        c.working_model = Some(dgp.working_model);
        c.shift = Some(dgp.shift);
        c.trunc_bound = Some(dgp.trunc_bound);
        c.seed = Some(dgp.seed);
        c.calibration_size = Some(self.calibration_size.unwrap_or(20_000));
        if c.battery.is_none() {
            c.battery = Some(hiertmle::sim::default_battery(self.study));
        }
        c
    }
}
