//! TOML experiment configuration.
//!
//! Every table rejects unknown keys. Numeric defaults are listed next to the
//! field they fill.

use std::path::{Path, PathBuf};

use hyperpencil::potential::Envelope;
use hyperpencil::radial::ModeBasis;
use hyperpencil::resolvent::ShippedPotential;
use hyperpencil::scattering::SourceProfile;
use hyperpencil::spectral::{Rectangle, Resolution, ScanMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Density,
    Entropy,
    Identities,
    KreinCheck,
    Twist,
    Adjoint,
    CombesThomas,
    PencilBound,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Density => "density",
            ExperimentKind::Entropy => "entropy",
            ExperimentKind::Identities => "identities",
            ExperimentKind::KreinCheck => "krein-check",
            ExperimentKind::Twist => "twist",
            ExperimentKind::Adjoint => "adjoint",
            ExperimentKind::CombesThomas => "combes-thomas",
            ExperimentKind::PencilBound => "pencil-bound",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Required whenever something random is drawn.
    pub seed: Option<u64>,
    pub potential: Option<PotentialConfig>,
    pub source: Option<SourceConfig>,
    pub density: Option<DensityParams>,
    pub entropy: Option<EntropyParams>,
    pub identities: Option<IdentitiesParams>,
    pub krein_check: Option<KreinParams>,
    pub twist: Option<TwistConfig>,
    pub adjoint: Option<AdjointParams>,
    pub combes_thomas: Option<CombesThomasParams>,
    pub pencil_bound: Option<PencilBoundParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub support_radius: f64,
    /// Grid step; default `1e-3 · support_radius`.
    pub step: Option<f64>,
    pub shape: PotentialShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialShape {
    Zero {
        dim: usize,
    },
    /// `diag(values)` on the whole support.
    Constant {
        diagonal: Vec<f64>,
    },
    /// Seeded from the run seed.
    RandomHermitian {
        dim: usize,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "half")]
        knot_spacing: f64,
        #[serde(default = "flat")]
        envelope: Envelope,
    },
    /// CSV of samples, resolved relative to the config file.
    Tabulated {
        path: PathBuf,
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub delta: f64,
    /// Default: the potential step.
    pub step: Option<f64>,
    pub profile: SourceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityParams {
    pub k_min: f64,
    pub k_max: f64,
    pub count: usize,
    #[serde(default)]
    pub t: f64,
    /// When set, evaluates through the pencil at `t = kξ` instead of fixed `t`.
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyParams {
    pub rectangle: Rectangle,
    /// Default 64 × 64 intervals.
    #[serde(default = "default_resolution")]
    pub resolution: Resolution,
    #[serde(default = "fixed_t")]
    pub mode: ScanMode,
    /// Truncation radii; empty means the full support.
    #[serde(default)]
    pub radii: Vec<f64>,
    /// Pass only if every entropy exceeds this.
    pub min_entropy: Option<f64>,
    /// Pass only if consecutive radii change the entropy by less than this
    /// fraction.
    pub max_relative_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentitiesParams {
    #[serde(default = "c100")]
    pub scattering_pair: usize,
    #[serde(default = "c50")]
    pub weyl: usize,
    #[serde(default = "c20")]
    pub herglotz: usize,
    /// Points per axis of the Herglotz `k` grid.
    #[serde(default = "c5")]
    pub herglotz_grid: usize,
    #[serde(default = "c50")]
    pub pencil_jost: usize,
    #[serde(default = "c30")]
    pub krein: usize,
    #[serde(default = "c20")]
    pub subharmonic: usize,
    #[serde(default = "c4")]
    pub max_dim: usize,
    #[serde(default = "five")]
    pub max_radius: f64,
    #[serde(default = "two")]
    pub t_max: f64,
    #[serde(default = "half")]
    pub k_min: f64,
    #[serde(default = "five")]
    pub k_max: f64,
    #[serde(default = "im_range")]
    pub im_k: [f64; 2],
    #[serde(default)]
    pub tolerances: IdentityTolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityTolerances {
    pub scattering_pair: f64,
    pub weyl: f64,
    pub herglotz: f64,
    pub pencil_jost: f64,
    pub krein: f64,
    pub subharmonic: f64,
}

impl Default for IdentityTolerances {
    fn default() -> Self {
        IdentityTolerances {
            scattering_pair: 1e-8,
            weyl: 1e-6,
            herglotz: 1e-8,
            pencil_jost: 1e-7,
            krein: 1e-6,
            subharmonic: hyperpencil::spectral::SUBHARMONIC_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KreinParams {
    /// `[re, im]` pairs.
    pub k: Vec<[f64; 2]>,
    pub xi: f64,
    #[serde(default = "tol6")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CouplingConfig {
    Zero,
    SphericallySymmetric {
        amplitude: f64,
        envelope: Envelope,
    },
    AxialHarmonic {
        amplitude: f64,
        gamma: f64,
        omega: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Seeded Hermitian matrices in the full basis, supported on `[0, radius]`.
    RandomTail {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        knot_spacing: f64,
        envelope: Envelope,
        radius: f64,
        #[serde(default = "step005")]
        step: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisChoice {
    Full,
    Zonal,
}

impl From<BasisChoice> for ModeBasis {
    fn from(b: BasisChoice) -> Self {
        match b {
            BasisChoice::Full => ModeBasis::Full,
            BasisChoice::Zonal => ModeBasis::Zonal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistConfig {
    #[serde(default = "alpha")]
    pub alpha: f64,
    #[serde(default = "c32")]
    pub b: usize,
    #[serde(default = "zonal")]
    pub basis: BasisChoice,
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub k_re: f64,
    #[serde(default = "half")]
    pub k_im: f64,
    #[serde(default = "minus_two")]
    pub xi: f64,
    #[serde(default = "gamma")]
    pub gamma: f64,
    #[serde(default = "twenty")]
    pub d: f64,
    #[serde(default = "r_max")]
    pub r_max: f64,
    #[serde(default = "half")]
    pub sample_step: f64,
    #[serde(default = "tol10")]
    pub tol: f64,
    /// Pass threshold for the liminf estimate.
    #[serde(default = "tenth")]
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointParams {
    #[serde(default = "alpha")]
    pub alpha: f64,
    #[serde(default = "c4")]
    pub b: usize,
    #[serde(default = "c20")]
    pub runs: usize,
    #[serde(default)]
    pub k_re: f64,
    #[serde(default = "half")]
    pub k_im: f64,
    #[serde(default = "minus_two")]
    pub xi: f64,
    /// Start radii; the tail integral must decrease along this list.
    #[serde(default = "adjoint_times")]
    pub times: Vec<f64>,
    #[serde(default = "sixty")]
    pub r_end: f64,
    pub coupling: CouplingConfig,
    #[serde(default = "tol6")]
    pub tolerance: f64,
    #[serde(default = "half")]
    pub sample_step: f64,
    #[serde(default = "tol10")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombesThomasParams {
    pub potentials: Vec<ShippedPotential>,
    #[serde(default = "length512")]
    pub length: f64,
    #[serde(default = "nodes4096")]
    pub nodes: usize,
    #[serde(default = "half")]
    pub k_re: f64,
    #[serde(default = "ct_im")]
    pub k_im: Vec<f64>,
    #[serde(default = "one")]
    pub xi: f64,
    /// Left edge of the source window.
    #[serde(default = "one")]
    pub left: f64,
    #[serde(default = "four")]
    pub separation_start: f64,
    #[serde(default = "four")]
    pub separation_step: f64,
    /// Pass requires `γ_fit ≥ min_rate_ratio · Im k`.
    #[serde(default = "half")]
    pub min_rate_ratio: f64,
    #[serde(default = "r2")]
    pub min_r_squared: f64,
    /// Accepted range of `γ_fit(2 Im k)/γ_fit(Im k)` for doubled pairs in `k_im`.
    #[serde(default = "doubling")]
    pub doubling_range: [f64; 2],
    #[serde(default = "tol8")]
    pub symmetry_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PencilBoundParams {
    pub potentials: Vec<ShippedPotential>,
    #[serde(default = "sixty_four")]
    pub length: f64,
    #[serde(default = "nodes1024")]
    pub nodes: usize,
    #[serde(default = "c100")]
    pub solves: usize,
    #[serde(default = "tol10")]
    pub residual_tolerance: f64,
    pub box3d: Option<Box3dParams>,
}

/// 3-D spot check on a cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3dParams {
    #[serde(default = "c16")]
    pub edge: usize,
    #[serde(default = "four")]
    pub length: f64,
    #[serde(default = "c5")]
    pub solves: usize,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn two() -> f64 {
    2.0
}
fn four() -> f64 {
    4.0
}
fn five() -> f64 {
    5.0
}
fn tenth() -> f64 {
    0.1
}
fn twenty() -> f64 {
    20.0
}
fn sixty() -> f64 {
    60.0
}
fn sixty_four() -> f64 {
    64.0
}
fn minus_two() -> f64 {
    -2.0
}
fn alpha() -> f64 {
    hyperpencil::radial::DEFAULT_ALPHA
}
fn gamma() -> f64 {
    0.95
}
fn r_max() -> f64 {
    1e4
}
fn r2() -> f64 {
    0.95
}
fn step005() -> f64 {
    0.05
}
fn length512() -> f64 {
    512.0
}
fn tol6() -> f64 {
    1e-6
}
fn tol8() -> f64 {
    1e-8
}
fn tol10() -> f64 {
    1e-10
}
fn c4() -> usize {
    4
}
fn c5() -> usize {
    5
}
fn c16() -> usize {
    16
}
fn c20() -> usize {
    20
}
fn c30() -> usize {
    30
}
fn c32() -> usize {
    32
}
fn c50() -> usize {
    50
}
fn c100() -> usize {
    100
}
fn nodes1024() -> usize {
    1024
}
fn nodes4096() -> usize {
    4096
}
fn flat() -> Envelope {
    Envelope::Flat
}
fn fixed_t() -> ScanMode {
    ScanMode::FixedT
}
fn zonal() -> BasisChoice {
    BasisChoice::Zonal
}
fn im_range() -> [f64; 2] {
    [0.2, 2.0]
}
fn ct_im() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn doubling() -> [f64; 2] {
    [1.6, 2.4]
}
fn adjoint_times() -> Vec<f64> {
    vec![10.0, 20.0, 40.0]
}
fn default_resolution() -> Resolution {
    Resolution { n_lambda: 64, n_t: 64 }
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the dotted path of the offending key.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(PotentialConfig {
            shape: PotentialShape::Tabulated { path: p, .. },
            ..
        }) = cfg.potential.as_mut()
        {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    fn sections(&self) -> [(&'static str, bool); 10] {
        [
            ("potential", self.potential.is_some()),
            ("source", self.source.is_some()),
            ("density", self.density.is_some()),
            ("entropy", self.entropy.is_some()),
            ("identities", self.identities.is_some()),
            ("krein-check", self.krein_check.is_some()),
            ("twist", self.twist.is_some()),
            ("adjoint", self.adjoint.is_some()),
            ("combes-thomas", self.combes_thomas.is_some()),
            ("pencil-bound", self.pencil_bound.is_some()),
        ]
    }

    /// Checks that exactly the sections the experiment reads are present.
    pub fn validate(&self) -> Result<(), CliError> {
        let kind = self.experiment;
        let needed: &[&str] = match kind {
            ExperimentKind::Density => &["potential", "source", "density"],
            ExperimentKind::Entropy => &["potential", "source", "entropy"],
            ExperimentKind::Identities => &["identities"],
            ExperimentKind::KreinCheck => &["potential", "krein-check"],
            ExperimentKind::Twist => &["twist"],
            ExperimentKind::Adjoint => &["adjoint"],
            ExperimentKind::CombesThomas => &["combes-thomas"],
            ExperimentKind::PencilBound => &["pencil-bound"],
        };
        for (name, present) in self.sections() {
            let wanted = needed.contains(&name);
            if wanted && !present {
                return Err(CliError::Config(format!("{name}: section required by experiment {}", kind.name())));
            }
            if present && !wanted {
                return Err(CliError::Config(format!("{name}: section not used by experiment {}", kind.name())));
            }
        }
        if let Some(p) = &self.potential {
            if !(p.support_radius > 0.0) {
                return Err(CliError::Config("potential.support_radius: must be positive".into()));
            }
            if let Some(h) = p.step {
                if !(h > 0.0) || h > p.support_radius {
                    return Err(CliError::Config("potential.step: must lie in (0, support_radius]".into()));
                }
            }
        }
        if let Some(d) = &self.density {
            if d.count == 0 || !(d.k_min > 0.0) || !(d.k_max >= d.k_min) {
                return Err(CliError::Config("density: need count ≥ 1 and 0 < k_min ≤ k_max".into()));
            }
        }
        if let Some(e) = &self.entropy {
            if e.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(CliError::Config("entropy.radii: radii must be positive".into()));
            }
        }
        if let Some(t) = &self.adjoint {
            if t.times.is_empty() || t.times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CliError::Config("adjoint.times: need an increasing, non-empty list".into()));
            }
        }
        for (name, list) in [
            ("combes-thomas.potentials", self.combes_thomas.as_ref().map(|c| &c.potentials)),
            ("pencil-bound.potentials", self.pencil_bound.as_ref().map(|c| &c.potentials)),
        ] {
            if list.is_some_and(|l| l.is_empty()) {
                return Err(CliError::Config(format!("{name}: list is empty")));
            }
        }
        if self.needs_seed() && self.seed.is_none() {
            return Err(CliError::Config(format!(
                "seed: experiment {} draws random data and needs a seed",
                kind.name()
            )));
        }
        Ok(())
    }

    fn needs_seed(&self) -> bool {
        let random_potential = matches!(
            self.potential,
            Some(PotentialConfig {
                shape: PotentialShape::RandomHermitian { .. },
                ..
            })
        );
        let random_coupling = |c: Option<&CouplingConfig>| matches!(c, Some(CouplingConfig::RandomTail { .. }));
        random_potential
            || self.identities.is_some()
            || self.pencil_bound.is_some()
            || self.adjoint.is_some()
            || random_coupling(self.twist.as_ref().map(|t| &t.coupling))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DENSITY: &str = r#"
experiment = "density"

[potential]
support_radius = 1.0
shape = { kind = "zero", dim = 1 }

[source]
delta = 1.0
profile = { kind = "indicator" }

[density]
k_min = 0.5
k_max = 5.0
count = 10
"#;

    #[test]
    fn parses_density() {
        let c = ExperimentConfig::from_toml(DENSITY).unwrap();
        assert_eq!(c.experiment, ExperimentKind::Density);
        assert_eq!(c.density.unwrap().t, 0.0);
    }

    #[test]
    fn unknown_key_reports_path() {
        let bad = DENSITY.replace("count = 10", "count = 10\nkmax = 3");
        match ExperimentConfig::from_toml(&bad) {
            Err(CliError::Config(m)) => assert!(m.contains("density") && m.contains("kmax"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_and_extra_sections() {
        let missing = DENSITY.replace("[density]\nk_min = 0.5\nk_max = 5.0\ncount = 10\n", "");
        assert!(matches!(ExperimentConfig::from_toml(&missing), Err(CliError::Config(_))));
        let extra = format!("{DENSITY}\n[twist]\ncoupling = {{ kind = \"zero\" }}\n");
        assert!(matches!(ExperimentConfig::from_toml(&extra), Err(CliError::Config(m)) if m.starts_with("twist")));
    }

    #[test]
    fn random_potential_needs_seed() {
        let rnd = DENSITY.replace(r#"{ kind = "zero", dim = 1 }"#, r#"{ kind = "random-hermitian", dim = 2 }"#);
        assert!(matches!(ExperimentConfig::from_toml(&rnd), Err(CliError::Config(m)) if m.starts_with("seed")));
        let seeded = format!("seed = 3\n{rnd}");
        assert!(ExperimentConfig::from_toml(&seeded).is_ok());
    }

    #[test]
    fn defaults_fill_twist() {
        let c = ExperimentConfig::from_toml("experiment = \"twist\"\n[twist]\ncoupling = { kind = \"zero\" }\n").unwrap();
        let t = c.twist.unwrap();
        assert_eq!((t.b, t.d, t.r_max, t.xi, t.k_im), (32, 20.0, 1e4, -2.0, 0.5));
    }
}
