//! Experiment configuration: one TOML file with a section per pipeline stage.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::caustic::{CausticLattice, DetectOptions};
use crate::diffeo::RedecomposeOptions;
use crate::error::{Error, Result};
use crate::fdref::FdConfig;
use crate::fio::{ConeCount, OperatorOptions, TableOptions};
use crate::grid::Grid;
use crate::hamilton::Medium;
use crate::partition::PartitionOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tiling: TilingConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub caustic: CausticConfig,
    #[serde(default)]
    pub diffeo: DiffeoConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub fio: FioConfig,
    #[serde(default)]
    pub fd: FdSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Constant,
    Lens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub c0: f64,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default)]
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t0: f64,
    pub t1: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t0: 0.0, t1: 7.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    pub length: f64,
    pub origin: [f64; 2],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 256, length: 25.6, origin: [-12.8, 0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub k_max: u32,
    pub angular_constant: f64,
    /// Rotation of every orientation ring, radians.
    #[serde(default = "half_pi")]
    pub angle_offset: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { k_max: 4, angular_constant: 5.0, angle_offset: FRAC_PI_2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub k: u32,
    /// Direction of the source box, radians.
    pub theta: f64,
    pub center: [f64; 2],
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { k: 3, theta: FRAC_PI_2, center: [0.0, 5.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausticConfig {
    /// δ_x, km.
    pub delta_x: f64,
    /// δ_ν, radians.
    pub delta_theta: f64,
    pub x_lo: [f64; 2],
    pub x_hi: [f64; 2],
    /// Half-width of the direction range around the source direction.
    pub theta_half_width: f64,
    pub rank_tol: f64,
    pub admissibility_tol: f64,
    pub rtol: f64,
}

impl Default for CausticConfig {
    fn default() -> Self {
        let d = DetectOptions::default();
        Self {
            delta_x: 0.25,
            delta_theta: 0.03,
            x_lo: [-10.0, -2.0],
            x_hi: [10.0, 12.0],
            theta_half_width: 0.95,
            rank_tol: d.rank_tol,
            admissibility_tol: d.admissibility_tol,
            rtol: d.rtol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorStrategy {
    /// One anchor at the source centre and direction per α.
    Source,
    /// Greedy anchors over the caustic set.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffeoConfig {
    /// α_i.
    pub alpha: Vec<f64>,
    pub anchor: AnchorStrategy,
    /// Greedy anchor radius in km and direction scale in radians.
    pub anchor_radius: f64,
    pub anchor_angle_scale: f64,
    /// 0 picks 9 boxes up to scale 2 and 11 above.
    pub max_boxes: usize,
    /// ϵ, re-decomposition precision.
    pub precision: f64,
    pub chi_threshold: f64,
}

impl Default for DiffeoConfig {
    fn default() -> Self {
        let r = RedecomposeOptions::default();
        Self {
            alpha: vec![1.0],
            anchor: AnchorStrategy::Source,
            anchor_radius: 3.0,
            anchor_angle_scale: 0.3,
            max_boxes: 0,
            precision: r.precision,
            chi_threshold: r.chi_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// J_{ν,k}: cones per box. `0` selects the scale-dependent default from `cones_j0`, `cones_k0`.
    pub cones: usize,
    pub cones_j0: f64,
    pub cones_k0: u32,
    pub overlap: f64,
    pub eps_trunc: f64,
    pub sheared_tol: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        let p = PartitionOptions::default();
        Self { cones: 1, cones_j0: 11.0, cones_k0: 2, overlap: p.overlap, eps_trunc: p.eps_trunc, sheared_tol: p.sheared_tol }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FioConfig {
    /// ε, separated-kernel accuracy.
    pub eps: f64,
    pub rank_cap: usize,
    pub nufft_tol: f64,
    pub table_spacing: f64,
    pub seed_spacing: f64,
    pub seed_margin: f64,
    pub box_precision: f64,
    pub renormalize: bool,
    /// Output rectangle `[lo, hi]`; empty means the whole image.
    pub window: Vec<[f64; 2]>,
}

impl Default for FioConfig {
    fn default() -> Self {
        let o = OperatorOptions::default();
        Self {
            eps: o.kernel_eps,
            rank_cap: o.rank_cap,
            nufft_tol: o.nufft_tol,
            table_spacing: o.table.spacing,
            seed_spacing: o.seed_spacing,
            seed_margin: o.seed_margin,
            box_precision: o.box_precision,
            renormalize: o.renormalize,
            window: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdSection {
    pub refine: usize,
    pub cfl: f64,
    pub order: usize,
    pub sponge_cells: usize,
    pub sponge_strength: f64,
}

impl Default for FdSection {
    fn default() -> Self {
        let f = FdConfig::default();
        Self { refine: f.refine, cfl: f.cfl, order: f.order, sponge_cells: f.sponge_cells, sponge_strength: f.sponge_strength }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Comparison disc `(centre, radius)`; `radius = 0` compares whole fields.
    pub compare_center: [f64; 2],
    pub compare_radius: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), compare_center: [0.0, 18.2], compare_radius: 3.0 }
    }
}

fn one() -> f64 {
    1.0
}

fn half_pi() -> f64 {
    FRAC_PI_2
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        check(m.c0 > 0.0 && m.c0.is_finite(), "model.c0", "must be positive")?;
        check(finite(&[m.kappa, m.sigma, m.center[0], m.center[1]]), "model", "parameters must be finite")?;
        if m.kind == ModelKind::Lens {
            check(m.sigma > 0.0, "model.sigma", "must be positive")?;
        }
        self.medium().validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        check(finite(&[self.time.t0, self.time.t1]) && self.time.t1 > self.time.t0, "time.t1", "must exceed time.t0")?;
        check(self.grid.n >= 4 && self.grid.n.is_power_of_two(), "grid.n", "must be a power of two >= 4")?;
        check(self.grid.length > 0.0 && finite(&self.grid.origin), "grid.length", "must be positive with a finite origin")?;
        check(self.tiling.k_max >= 1, "tiling.k_max", "must be at least 1")?;
        check(self.tiling.angular_constant > 0.0, "tiling.angular_constant", "must be positive")?;
        check(self.tiling.angle_offset.is_finite(), "tiling.angle_offset", "must be finite")?;
        check(self.source.k <= self.tiling.k_max, "source.k", "must not exceed tiling.k_max")?;
        check(finite(&[self.source.theta, self.source.center[0], self.source.center[1]]), "source", "must be finite")?;
        let c = &self.caustic;
        check(c.delta_x > 0.0, "caustic.delta_x", "must be positive")?;
        check(c.delta_theta > 0.0, "caustic.delta_theta", "must be positive")?;
        check(c.x_hi[0] > c.x_lo[0] && c.x_hi[1] > c.x_lo[1], "caustic.x_hi", "must exceed caustic.x_lo")?;
        check(c.theta_half_width > 0.0 && c.theta_half_width < std::f64::consts::PI, "caustic.theta_half_width", "must lie in (0, pi)")?;
        check(c.rank_tol > 0.0 && c.admissibility_tol > 0.0 && c.admissibility_tol < 1.0, "caustic.admissibility_tol", "must lie in (0, 1)")?;
        check(c.rtol > 0.0 && c.rtol < 1e-2, "caustic.rtol", "must lie in (0, 1e-2)")?;
        let d = &self.diffeo;
        check(d.alpha.iter().all(|a| a.is_finite() && *a != 0.0), "diffeo.alpha", "entries must be finite and nonzero")?;
        check(d.precision > 0.0 && d.precision < 1.0, "diffeo.precision", "must lie in (0, 1)")?;
        check(d.anchor_radius > 0.0 && d.anchor_angle_scale > 0.0, "diffeo.anchor_radius", "radius and angle scale must be positive")?;
        let p = &self.partition;
        check(p.cones >= 1 || p.cones_j0 >= 1.0, "partition.cones", "must be at least 1, or 0 with cones_j0 >= 1")?;
        check(p.overlap > 0.0, "partition.overlap", "must be positive")?;
        check(p.eps_trunc > 0.0 && p.eps_trunc < 1.0, "partition.eps_trunc", "must lie in (0, 1)")?;
        check(p.sheared_tol > 0.0 && p.sheared_tol < 1.0, "partition.sheared_tol", "must lie in (0, 1)")?;
        let f = &self.fio;
        check(f.eps > 1e-10 && f.eps < 1e-2, "fio.eps", "must lie in (1e-10, 1e-2)")?;
        check(f.rank_cap >= 1, "fio.rank_cap", "must be at least 1")?;
        check(f.nufft_tol > 0.0 && f.nufft_tol < 1e-2, "fio.nufft_tol", "must lie in (0, 1e-2)")?;
        check(f.table_spacing > 0.0 && f.seed_spacing > 0.0, "fio.table_spacing", "spacings must be positive")?;
        check(f.seed_margin >= 0.0, "fio.seed_margin", "must be nonnegative")?;
        check(f.box_precision > 0.0 && f.box_precision < 1.0, "fio.box_precision", "must lie in (0, 1)")?;
        check(f.window.is_empty() || (f.window.len() == 2 && f.window[1][0] > f.window[0][0] && f.window[1][1] > f.window[0][1]), "fio.window", "must be empty or [[x_lo, y_lo], [x_hi, y_hi]]")?;
        self.fd_config().validate().map_err(|e| Error::Config(format!("fd: {e}")))?;
        check(self.output.compare_radius >= 0.0, "output.compare_radius", "must be nonnegative")?;
        Ok(())
    }

    pub fn medium(&self) -> Medium {
        let m = &self.model;
        match m.kind {
            ModelKind::Constant => Medium::Constant { c0: m.c0 },
            ModelKind::Lens => Medium::Lens { c0: m.c0, kappa: m.kappa, sigma: m.sigma, center: m.center },
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.n, self.grid.length, self.grid.origin)
    }

    pub fn lattice(&self) -> Result<CausticLattice> {
        let c = &self.caustic;
        CausticLattice::covering(c.x_lo, c.x_hi, c.delta_x, self.source.theta - c.theta_half_width, self.source.theta + c.theta_half_width, c.delta_theta)
    }

    pub fn detect_options(&self) -> DetectOptions {
        DetectOptions { rank_tol: self.caustic.rank_tol, admissibility_tol: self.caustic.admissibility_tol, rtol: self.caustic.rtol }
    }

    pub fn partition_options(&self) -> PartitionOptions {
        let p = &self.partition;
        PartitionOptions { overlap: p.overlap, eps_trunc: p.eps_trunc, sheared_tol: p.sheared_tol, ..PartitionOptions::default() }
    }

    pub fn cone_count(&self) -> ConeCount {
        let p = &self.partition;
        if p.cones == 0 {
            ConeCount::Default { j0: p.cones_j0, k0: p.cones_k0 }
        } else {
            ConeCount::Fixed(p.cones)
        }
    }

    pub fn operator_options(&self) -> OperatorOptions {
        let f = &self.fio;
        let d = &self.diffeo;
        let window = if f.window.len() == 2 { Some((f.window[0], f.window[1])) } else { None };
        OperatorOptions {
            cones: self.cone_count(),
            kernel_eps: f.eps,
            rank_cap: f.rank_cap,
            nufft_tol: f.nufft_tol,
            table: TableOptions { spacing: f.table_spacing, window, ..TableOptions::default() },
            box_precision: f.box_precision,
            redecompose: RedecomposeOptions { precision: d.precision, chi_threshold: d.chi_threshold, max_boxes: d.max_boxes },
            renormalize: f.renormalize,
            seed_margin: f.seed_margin,
            seed_spacing: f.seed_spacing,
        }
    }

    pub fn fd_config(&self) -> FdConfig {
        let f = &self.fd;
        FdConfig { refine: f.refine, cfl: f.cfl, order: f.order, sponge_cells: f.sponge_cells, sponge_strength: f.sponge_strength, dt: None }
    }

    /// Canonical TOML with every default filled in.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::canonical_text`], hex.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_text().as_bytes());
        d.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// The user-chosen accuracy parameters, as a TOML table.
    pub fn table1_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[parameters]");
        let _ = writeln!(s, "delta_theta = {:?}", self.caustic.delta_theta);
        let _ = writeln!(s, "delta_x = {:?}", self.caustic.delta_x);
        let _ = writeln!(s, "alpha = {:?}", self.diffeo.alpha);
        match self.cone_count() {
            ConeCount::Fixed(j) => {
                let _ = writeln!(s, "cones = {j}");
            }
            ConeCount::Default { j0, k0 } => {
                let per: Vec<usize> = (0..=self.tiling.k_max).map(|k| self.cone_count().at_scale(k)).collect();
                let _ = writeln!(s, "cones = {per:?}");
                let _ = writeln!(s, "cones_j0 = {j0:?}");
                let _ = writeln!(s, "cones_k0 = {k0}");
            }
        }
        let _ = writeln!(s, "redecompose_precision = {:?}", self.diffeo.precision);
        let _ = writeln!(s, "kernel_eps = {:?}", self.fio.eps);
        s
    }
}
