use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use csrom::daereduce::DaeArch;
use csrom::densenet::TrainConfig;
use csrom::elastic::{ElasticModel, Material, TetMesh};
use csrom::neucubature::CubatureConfig;
use csrom::posegen::ForceScript;
use csrom::rdsim::{Integration, SimConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Box mesh used when no mesh file is given.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BarSpec {
    pub cells: [usize; 3],
    pub size: [f64; 3],
}

impl Default for BarSpec {
    fn default() -> Self {
        Self {
            cells: [10, 2, 2],
            size: [1.0, 0.2, 0.2],
        }
    }
}

/// Everything a run needs. Unknown keys are rejected so typos surface.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mesh in the plain-text node/element format; relative to the config
    /// file. Falls back to `bar`.
    pub mesh: Option<PathBuf>,
    pub bar: BarSpec,
    pub material: Material,
    /// Pinned vertices; `None` pins every vertex at the minimum x.
    pub fixed_vertices: Option<Vec<usize>>,
    pub gravity: [f64; 3],
    pub script: ForceScript,
    pub n_p: usize,
    /// Lowest-energy poses used for PCA; `None` means half the set.
    pub pca_subset: Option<usize>,
    pub arch: DaeArch,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub drop_fict: Option<bool>,
    pub integration: Option<Integration>,
    pub steps: usize,
    /// Initial reduced velocity; rest when absent.
    pub initial_rdot: Option<Vec<f64>>,
    /// Write an OBJ every this many frames, 0 for none.
    pub obj_every: usize,
    pub cubature: CubatureConfig,
    /// Fraction of cubature samples held out for the error report.
    pub held_out: f64,
    /// Greedy baseline sizes reported by `validate`.
    pub table_sizes: Vec<usize>,
    pub bench_repeats: usize,
    /// Overrides every named seed when set.
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mesh: None,
            bar: BarSpec::default(),
            material: Material::default(),
            fixed_vertices: None,
            gravity: [0.0, 0.0, -9.81],
            script: ForceScript::default(),
            n_p: 4,
            pca_subset: None,
            arch: DaeArch::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            drop_fict: None,
            integration: None,
            steps: 100,
            initial_rdot: None,
            obj_every: 1,
            cubature: CubatureConfig::default(),
            held_out: 0.2,
            table_sizes: vec![10, 20, 50, 100, 200],
            bench_repeats: 10,
            seed: None,
            out: PathBuf::from("out"),
        }
    }
}

/// Flag values that replace top-level keys of the config document.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub drop_fict: bool,
    pub integration: Option<Integration>,
}

impl Overrides {
    fn apply(&self, doc: &mut serde_json::Map<String, Value>) -> anyhow::Result<()> {
        if let Some(s) = self.seed {
            doc.insert("seed".into(), s.into());
        }
        if let Some(o) = &self.out {
            doc.insert("out".into(), serde_json::to_value(o)?);
        }
        if self.drop_fict {
            doc.insert("drop_fict".into(), true.into());
        }
        if let Some(i) = self.integration {
            doc.insert("integration".into(), serde_json::to_value(i)?);
        }
        Ok(())
    }
}

impl RunConfig {
    /// Reads the JSON document (or starts from defaults), applies flag
    /// overrides to its top level and resolves the derived settings.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                match serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))? {
                    Value::Object(m) => m,
                    _ => bail!("config {} must be a JSON object", p.display()),
                }
            }
            None => serde_json::Map::new(),
        };
        overrides.apply(&mut doc)?;
        let mut cfg: RunConfig = serde_json::from_value(Value::Object(doc)).context("invalid config")?;
        if let (Some(mesh), Some(dir)) = (&cfg.mesh, path.and_then(Path::parent)) {
            if mesh.is_relative() {
                cfg.mesh = Some(dir.join(mesh));
            }
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.script.seed = s;
            self.arch.seed = s;
            self.train.seed = s;
            self.cubature.seed = s;
        }
        if let Some(d) = self.drop_fict {
            self.sim.drop_fict = d;
        }
        if let Some(i) = self.integration {
            self.sim.integration = i;
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(m) = &self.mesh {
            if !m.exists() {
                bail!("mesh file {} does not exist", m.display());
            }
        }
        if self.n_p == 0 || self.arch.n_q == 0 || self.arch.depth == 0 {
            bail!("n_p, arch.n_q and arch.depth must be positive");
        }
        if self.steps == 0 {
            bail!("steps must be positive");
        }
        if !(0.0..1.0).contains(&self.held_out) {
            bail!("held_out must lie in [0, 1), got {}", self.held_out);
        }
        self.material.validate()?;
        self.script.validate()?;
        self.sim.validate()?;
        self.cubature.validate()?;
        Ok(())
    }

    pub fn model(&self) -> anyhow::Result<ElasticModel> {
        let mesh = match &self.mesh {
            Some(p) => TetMesh::load(p).with_context(|| format!("loading mesh {}", p.display()))?,
            None => TetMesh::bar(self.bar.cells, self.bar.size)?,
        };
        let fixed = match &self.fixed_vertices {
            Some(v) => v.clone(),
            None => {
                let x0 = mesh.vertices.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
                let tol = 1e-9 * mesh.bbox_diagonal();
                mesh.vertices_where(|p| p[0] <= x0 + tol)
            }
        };
        let mut model = ElasticModel::new(mesh, self.material)?;
        model.fix_vertices(&fixed)?;
        Ok(model)
    }

    pub fn poses_path(&self) -> PathBuf {
        self.out.join("poses.bin")
    }

    pub fn rom_dir(&self) -> PathBuf {
        self.out.join("rom")
    }

    pub fn cubature_dir(&self) -> PathBuf {
        self.out.join("cubature")
    }
}
