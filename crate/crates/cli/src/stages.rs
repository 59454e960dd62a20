use std::path::{Path, PathBuf};
use std::time::Instant;

use toml::{Table, Value};
use wpfio::caustic::CausticMap;
use wpfio::config::ExperimentConfig;
use wpfio::experiment::{compare, phase_at_maxima, Comparison, Experiment};
use wpfio::fgrid::{Array, Data};
use wpfio::partition::Cover;
use wpfio::{Error, Field, Result};

const TILE: &str = "tile";
const TRACE: &str = "trace";
const CAUSTICS: &str = "caustics";
const PREPARE: &str = "prepare";
const APPLY: &str = "apply";
const FDREF: &str = "fdref";
const COMPARE: &str = "compare";

pub struct Context {
    exp: Experiment,
    hash: String,
    root: PathBuf,
    force: bool,
}

/// Files a stage produced plus its stage-specific report.
struct Outputs {
    stage: &'static str,
    files: Vec<String>,
    report: Table,
    started: Instant,
}

impl Outputs {
    fn new(stage: &'static str) -> Self {
        Self { stage, files: Vec::new(), report: Table::new(), started: Instant::now() }
    }

    fn set(&mut self, key: &str, v: impl Into<Value>) {
        self.report.insert(key.into(), v.into());
    }
}

fn pairs(v: [f64; 2]) -> Value {
    Value::Array(vec![v[0].into(), v[1].into()])
}

fn comparison_table(c: &Comparison) -> Table {
    let mut t = Table::new();
    t.insert("rel_l2".into(), c.rel_l2.into());
    t.insert("correlation".into(), c.correlation.into());
    t.insert("peak_xcorr".into(), c.peak_xcorr.into());
    t.insert("lag".into(), pairs(c.lag));
    t.insert("phase".into(), c.phase.into());
    t
}

fn set_file(name: &str) -> String {
    format!("F{}.fgrid", name.trim_start_matches('O'))
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, force: bool) -> Result<Self> {
        let hash = cfg.hash();
        let root = out.join(&hash[..16]);
        std::fs::create_dir_all(&root)?;
        let canon = cfg.canonical_text();
        let cpath = root.join("config.toml");
        if std::fs::read_to_string(&cpath).ok().as_deref() != Some(canon.as_str()) {
            std::fs::write(&cpath, canon)?;
        }
        Ok(Self { exp: Experiment::new(cfg)?, hash, root, force })
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn manifest(&self, stage: &str) -> Option<Table> {
        let text = std::fs::read_to_string(self.dir(stage).join("manifest.toml")).ok()?;
        text.parse().ok()
    }

    /// Manifest present for this configuration with every listed artifact on disk.
    fn complete(&self, stage: &str) -> bool {
        let Some(m) = self.manifest(stage) else { return false };
        let Some(run) = m.get("run").and_then(|v| v.as_table()) else { return false };
        if run.get("config_hash").and_then(|v| v.as_str()) != Some(self.hash.as_str()) {
            return false;
        }
        let files = run.get("artifacts").and_then(|v| v.as_array()).cloned().unwrap_or_default();
        files.iter().all(|f| f.as_str().is_some_and(|f| self.dir(stage).join(f).exists()))
    }

    fn require(&self, stage: &str) -> Result<()> {
        if self.complete(stage) {
            Ok(())
        } else {
            Err(Error::Upstream(format!("no complete '{stage}' output in {}; run `wpfio {stage}` first", self.root.display())))
        }
    }

    /// True if the stage can be skipped.
    fn begin(&self, stage: &str) -> Result<bool> {
        if !self.force && self.complete(stage) {
            println!("{stage}: up to date in {}", self.dir(stage).display());
            return Ok(true);
        }
        std::fs::create_dir_all(self.dir(stage))?;
        Ok(false)
    }

    fn metadata(&self, stage: &str, name: &str) -> String {
        format!("[artifact]\nstage = \"{stage}\"\nname = \"{name}\"\nconfig_hash = \"{}\"\n\n{}", self.hash, self.exp.cfg.table1_text())
    }

    fn write_field(&self, o: &mut Outputs, name: &str, f: &Field) -> Result<()> {
        let file = format!("{name}.fgrid");
        Array::from_field(f, &self.metadata(o.stage, name)).write(self.dir(o.stage).join(&file))?;
        o.files.push(file);
        Ok(())
    }

    fn write_array(&self, o: &mut Outputs, name: &str, dims: Vec<usize>, data: Data) -> Result<()> {
        let file = format!("{name}.fgrid");
        Array::new(dims, data, self.metadata(o.stage, name))?.write(self.dir(o.stage).join(&file))?;
        o.files.push(file);
        Ok(())
    }

    fn write_text(&self, o: &mut Outputs, file: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir(o.stage).join(file), text)?;
        o.files.push(file.to_string());
        Ok(())
    }

    fn finish(&self, o: Outputs) -> Result<()> {
        let mut run = Table::new();
        run.insert("stage".into(), o.stage.into());
        run.insert("config_hash".into(), self.hash.clone().into());
        run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        run.insert("artifacts".into(), Value::Array(o.files.iter().map(|f| Value::from(f.as_str())).collect()));
        let mut timings = Table::new();
        timings.insert("seconds".into(), o.started.elapsed().as_secs_f64().into());
        let mut m = Table::new();
        m.insert("run".into(), run.into());
        let params: Table = self.exp.cfg.table1_text().parse().expect("parameter table parses");
        m.extend(params);
        m.insert("report".into(), o.report.into());
        m.insert("timings".into(), timings.into());
        m.insert("config".into(), Value::try_from(&self.exp.cfg).map_err(|e| Error::Config(e.to_string()))?);
        let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(self.dir(o.stage).join("manifest.toml"), text)?;
        println!("{}: wrote {} artifacts to {}", o.stage, o.files.len(), self.dir(o.stage).display());
        Ok(())
    }

    fn source_field(&self) -> Result<Field> {
        Array::read(self.dir(TILE).join("source.fgrid"))?.to_field()
    }

    fn cover(&self) -> Result<(CausticMap, Cover)> {
        let cm = self.exp.caustics()?;
        let cover = self.exp.cover(&cm)?;
        Ok((cm, cover))
    }

    pub fn tile(&self) -> Result<()> {
        if self.begin(TILE)? {
            return Ok(());
        }
        let mut o = Outputs::new(TILE);
        let t = self.exp.tiling()?;
        let n = t.grid.n;
        self.write_text(&mut o, "tiling.toml", &t.metadata_text())?;
        self.write_array(&mut o, "copartition", vec![n, n], Data::F64(t.copartition_sum()))?;
        let s = self.exp.source(&t)?;
        self.write_field(&mut o, "packet", &s.packet)?;
        self.write_field(&mut o, "source", &s.field)?;
        let c = wpfio::frame::forward_transform(&s.field, &t)?.restrict(&[s.box_id]);
        let b = &t.boxes[s.box_id];
        self.write_array(&mut o, "source_coefficients", b.lattice.dims.to_vec(), Data::C128(c.boxes[&s.box_id].clone()))?;
        o.set("box_count", t.boxes.len() as i64);
        o.set("source_box", s.box_id as i64);
        o.set("source_k", b.scale_k as i64);
        o.set("source_theta", b.theta);
        o.set("source_coefficient", s.coefficient as i64);
        o.set("packet_energy", s.packet.energy());
        o.set("source_energy", s.field.energy());
        self.finish(o)
    }

    pub fn trace(&self, rays: usize, samples: usize) -> Result<()> {
        self.require(TILE)?;
        if self.begin(TRACE)? {
            return Ok(());
        }
        let mut o = Outputs::new(TRACE);
        let t = self.exp.tiling()?;
        let fan = self.exp.ray_fan(&t, rays, samples)?;
        let flat: Vec<f64> = fan.iter().flatten().flatten().copied().collect();
        self.write_array(&mut o, "rays", vec![rays, samples, 6], Data::F64(flat))?;
        let crossing = fan.iter().filter(|r| r.windows(2).any(|w| w[0][5] * w[1][5] < 0.0)).count();
        o.set("rays", rays as i64);
        o.set("samples", samples as i64);
        o.set("rays_with_sign_change", crossing as i64);
        self.finish(o)
    }

    pub fn caustics(&self) -> Result<()> {
        self.require(TILE)?;
        if self.begin(CAUSTICS)? {
            return Ok(());
        }
        let mut o = Outputs::new(CAUSTICS);
        let cm = self.exp.caustics()?;
        let lat = cm.lattice;
        // lattice index is (θ, x1, x2) with x2 fastest
        let dims = vec![lat.ntheta, lat.nx[0], lat.nx[1]];
        let labels: Vec<f64> = cm.samples.iter().zip(&cm.labels).map(|(s, l)| if s.masked { 0.0 } else { l.code() as f64 }).collect();
        self.write_array(&mut o, "labels", dims.clone(), Data::F64(labels))?;
        self.write_array(&mut o, "det_w1", dims.clone(), Data::F64(cm.samples.iter().map(|s| s.det_w1).collect()))?;
        self.write_array(&mut o, "rank_ratio", dims.clone(), Data::F64(cm.samples.iter().map(|s| if s.sigma_max > 0.0 { s.sigma_min / s.sigma_max } else { 0.0 }).collect()))?;
        self.write_array(&mut o, "kmah", dims, Data::F64(cm.samples.iter().map(|s| s.kmah as f64).collect()))?;
        let sigma: Vec<f64> = cm.sigma.iter().flat_map(|p| [p.x[0], p.x[1], p.theta]).collect();
        self.write_array(&mut o, "sigma_points", vec![cm.sigma.len(), 3], Data::F64(sigma))?;
        let cusps: Vec<f64> = cm.cusps.iter().flat_map(|c| [c.x[0], c.x[1], c.y[0], c.y[1], c.theta]).collect();
        self.write_array(&mut o, "cusps", vec![cm.cusps.len(), 5], Data::F64(cusps))?;
        o.set("samples", lat.len() as i64);
        o.set("set_count", cm.set_count() as i64);
        o.set("has_cusp", cm.has_cusp());
        let sets: Vec<Value> = cm
            .sets
            .iter()
            .map(|s| {
                let mut t = Table::new();
                t.insert("id".into(), (s.id as i64).into());
                t.insert("kind".into(), format!("{:?}", s.kind).into());
                t.insert("count".into(), (s.count as i64).into());
                t.insert("kmah".into(), (s.kmah as i64).into());
                t.into()
            })
            .collect();
        o.set("sets", Value::Array(sets));
        self.finish(o)
    }

    pub fn prepare(&self) -> Result<()> {
        self.require(CAUSTICS)?;
        if self.begin(PREPARE)? {
            return Ok(());
        }
        let mut o = Outputs::new(PREPARE);
        let (_, cover) = self.cover()?;
        let lat = cover.lattice;
        let dims = vec![lat.ntheta, lat.nx[0], lat.nx[1]];
        for set in &cover.sets {
            let name = set.name();
            self.write_array(&mut o, &format!("weight_{name}"), dims.clone(), Data::F64(set.weight.clone()))?;
            self.write_array(&mut o, &format!("admissible_{name}"), dims.clone(), Data::F64(set.admissible.iter().map(|a| *a as u8 as f64).collect()))?;
        }
        let sum = cover.sum();
        let dev = sum.iter().zip(&cover.masked).filter(|(_, m)| !**m).map(|(s, _)| (s - 1.0).abs()).fold(0.0, f64::max);
        self.write_array(&mut o, "partition_sum", dims, Data::F64(sum))?;
        self.write_text(&mut o, "cover.txt", &cover.metadata_text())?;
        let t = self.exp.tiling()?;
        let u = self.source_field()?;
        let s = self.exp.source(&t)?;
        let b = &t.boxes[s.box_id];
        let spec = t.box_spectrum(&u, b)?;
        let ropt = self.exp.cfg.operator_options().redecompose_at(b.scale_k);
        let mut reports = Vec::new();
        for (j, p) in cover.diffeos.iter().enumerate() {
            let ut = wpfio::diffeo::pullback(&spec, p, &t.grid, self.exp.cfg.fio.nufft_tol)?;
            let (_, rep) = wpfio::diffeo::redecompose(&ut, &t, b, Some(p), &ropt)?;
            self.write_field(&mut o, &format!("pullback_{j}"), &ut)?;
            let mut r: Table = rep.metadata_text().parse().map_err(|e| Error::Format(format!("report: {e}")))?;
            let anchor: Table = p.metadata_text().parse().map_err(|e| Error::Format(format!("anchor: {e}")))?;
            r.insert("anchor".into(), anchor.into());
            reports.push(Value::Table(r));
        }
        o.set("sets", Value::Array(cover.sets.iter().map(|s| Value::from(s.name())).collect()));
        o.set("gap_count", cover.gap_count() as i64);
        o.set("max_partition_deviation", dev);
        o.set("redecomposition", Value::Array(reports));
        self.finish(o)
    }

    pub fn apply(&self) -> Result<()> {
        self.require(PREPARE)?;
        if self.begin(APPLY)? {
            return Ok(());
        }
        let mut o = Outputs::new(APPLY);
        let (_, cover) = self.cover()?;
        let t = self.exp.tiling()?;
        let u = self.source_field()?;
        let (res, log) = self.exp.apply(&t, &cover, &u)?;
        self.write_field(&mut o, "total", &res.total)?;
        for s in &res.sets {
            let file = set_file(&s.name);
            self.write_field(&mut o, file.trim_end_matches(".fgrid"), &s.field)?;
        }
        self.write_text(&mut o, "report.txt", &res.report_text())?;
        let entries: Vec<Value> = log
            .iter()
            .map(|e| {
                let mut t = Table::new();
                t.insert("set".into(), cover.sets[e.set].name().into());
                t.insert("box".into(), (e.box_id as i64).into());
                t.insert("cone".into(), (e.beta as i64).into());
                t.insert("theta".into(), e.theta.into());
                t.insert("rank".into(), (e.rank as i64).into());
                t.insert("kernel_error".into(), e.kernel_error.into());
                t.insert("nodes".into(), (e.valid_nodes as i64).into());
                t.into()
            })
            .collect();
        o.set("input_energy", u.energy());
        o.set("output_energy", res.total.energy());
        o.set("input_residual", res.input_residual);
        let mut sets = Table::new();
        for s in &res.sets {
            let mut t = Table::new();
            t.insert("energy".into(), s.field.energy().into());
            t.insert("renormalization".into(), s.renormalization.into());
            t.insert("boxes".into(), (s.boxes.len() as i64).into());
            sets.insert(s.name.clone(), t.into());
        }
        o.set("sets", sets);
        o.set("tables", Value::Array(entries));
        self.finish(o)
    }

    pub fn fdref(&self) -> Result<()> {
        self.require(TILE)?;
        if self.begin(FDREF)? {
            return Ok(());
        }
        let mut o = Outputs::new(FDREF);
        let u = self.source_field()?;
        let cfg = self.exp.cfg.fd_config();
        let fd = self.exp.fdref(&u)?;
        self.write_field(&mut o, "field", &fd.field)?;
        for w in &fd.warnings {
            eprintln!("fdref: warning: {w}");
        }
        let meta: Table = fd.metadata_text(&cfg).parse().map_err(|e| Error::Format(format!("fd metadata: {e}")))?;
        o.report.extend(meta);
        o.set("input_energy", u.energy());
        o.set("output_energy", fd.field.energy());
        self.finish(o)
    }

    pub fn compare(&self, a: Option<PathBuf>, b: Option<PathBuf>) -> Result<()> {
        if a.is_none() {
            self.require(APPLY)?;
        }
        if b.is_none() {
            self.require(FDREF)?;
        }
        if self.begin(COMPARE)? && a.is_none() && b.is_none() {
            return Ok(());
        }
        std::fs::create_dir_all(self.dir(COMPARE))?;
        let mut o = Outputs::new(COMPARE);
        let pa = a.unwrap_or_else(|| self.dir(APPLY).join("total.fgrid"));
        let pb = b.unwrap_or_else(|| self.dir(FDREF).join("field.fgrid"));
        let fa = Array::read(&pa)?.to_field()?;
        let fb = Array::read(&pb)?.to_field()?;
        let oc = &self.exp.cfg.output;
        let disc = (oc.compare_radius > 0.0).then_some((oc.compare_center, oc.compare_radius));
        let whole = compare(&fa, &fb, None)?;
        let c = match disc {
            Some(d) => compare(&fa, &fb, Some(d))?,
            None => whole.clone(),
        };
        let n = fa.grid.n;
        self.write_array(&mut o, "phase_map", vec![n, n], Data::F64(c.phase_map.clone()))?;
        o.set("a", pa.display().to_string());
        o.set("b", pb.display().to_string());
        o.set("region", comparison_table(&c));
        o.set("whole", comparison_table(&whole));
        // per-set phases at the maxima of each contribution inside the disc
        if let Some(d) = disc {
            let mut sets = Table::new();
            for entry in std::fs::read_dir(self.dir(APPLY)).into_iter().flatten().flatten() {
                let name = entry.file_name().to_string_lossy().to_string();
                if !(name.starts_with('F') && name.ends_with(".fgrid")) {
                    continue;
                }
                let f = Array::read(entry.path())?.to_field()?;
                if f.energy() == 0.0 {
                    continue;
                }
                let mut t = comparison_table(&compare(&f, &fb, Some(d))?);
                let peaks = phase_at_maxima(&f, &fb, d, 5)?;
                t.insert("peak_phases".into(), Value::Array(peaks.iter().map(|(_, p)| Value::from(*p)).collect()));
                sets.insert(name.trim_end_matches(".fgrid").to_string(), t.into());
            }
            o.set("sets", sets);
        }
        self.finish(o)
    }
}

/// Comparison of two field files without a configuration.
pub fn compare_files(a: &Path, b: &Path, disc: Option<([f64; 2], f64)>, out: &Path) -> Result<()> {
    let fa = Array::read(a)?.to_field()?;
    let fb = Array::read(b)?.to_field()?;
    let c = compare(&fa, &fb, disc)?;
    std::fs::create_dir_all(out)?;
    let n = fa.grid.n;
    let meta = format!("[artifact]\nstage = \"compare\"\nname = \"phase_map\"\na = {:?}\nb = {:?}\n", a.display().to_string(), b.display().to_string());
    Array::new(vec![n, n], Data::F64(c.phase_map.clone()), meta)?.write(out.join("phase_map.fgrid"))?;
    let mut m = Table::new();
    m.insert("region".into(), comparison_table(&c).into());
    std::fs::write(out.join("compare.toml"), toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?)?;
    println!("compare: rel_l2 {:.6e} peak_xcorr {:.6} lag [{}, {}]", c.rel_l2, c.peak_xcorr, c.lag[0], c.lag[1]);
    Ok(())
}
