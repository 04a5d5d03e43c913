//! Character rigs, blendshape banks and mesh composition.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const RIG_FILE_VERSION: u32 = 1;
pub const BANK_FILE_VERSION: u32 = 1;

/// A triangle-free vertex cloud stored as `[x0, y0, z0, x1, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mesh {
    vertices: Vec<f64>,
}

impl Mesh {
    pub fn new(vertices: Vec<f64>) -> Result<Self> {
        if vertices.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "mesh coordinate count {} is not divisible by 3",
                vertices.len()
            )));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("mesh coordinate {i} is not finite")));
        }
        Ok(Self { vertices })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn coords(&self) -> &[f64] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        let v = &self.vertices[3 * i..3 * i + 3];
        [v[0], v[1], v[2]]
    }
}

/// A named delta shape, stored as an offset from the neutral mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub name: String,
    pub vertices: Mesh,
}

/// Neutral mesh plus an ordered set of delta shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeBank {
    neutral: Mesh,
    deltas: Vec<Delta>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    version: u32,
    neutral: Mesh,
    deltas: Vec<Delta>,
}

impl BlendshapeBank {
    pub fn new(neutral: Mesh, deltas: Vec<Delta>) -> Result<Self> {
        let mut names = HashSet::new();
        for d in &deltas {
            if d.vertices.vertex_count() != neutral.vertex_count() {
                return Err(Error::invalid(format!(
                    "delta '{}' has {} vertices, neutral has {}",
                    d.name,
                    d.vertices.vertex_count(),
                    neutral.vertex_count()
                )));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::invalid(format!("duplicate delta name '{}'", d.name)));
            }
        }
        Ok(Self { neutral, deltas })
    }

    pub fn neutral(&self) -> &Mesh {
        &self.neutral
    }

    pub fn deltas(&self) -> &[Delta] {
        &self.deltas
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: BankFile = io::read_json(path)?;
        io::check_version(path, file.version, BANK_FILE_VERSION)?;
        // Mesh is transparent over Vec<f64>, so re-run its checks.
        let neutral = Mesh::new(file.neutral.vertices)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let deltas = file
            .deltas
            .into_iter()
            .map(|d| {
                Ok(Delta {
                    name: d.name,
                    vertices: Mesh::new(d.vertices.vertices)?,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(neutral, deltas).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &BankFile {
                version: BANK_FILE_VERSION,
                neutral: self.neutral.clone(),
                deltas: self.deltas.clone(),
            },
        )
    }
}

/// `B = B0 + sum_i w_i * B_i` with `B_i` stored as deltas.
pub fn compose_blendshapes(bank: &BlendshapeBank, weights: &[f64]) -> Result<Mesh> {
    if weights.len() != bank.deltas.len() {
        return Err(Error::dim("blendshape weights", bank.deltas.len(), weights.len()));
    }
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::invalid(format!("blendshape weight {i} is not finite")));
        }
        if !(0.0..=1.0).contains(w) {
            return Err(Error::invalid(format!(
                "blendshape weight {i} = {w} outside [0, 1]"
            )));
        }
    }
    Ok(compose_unchecked(bank, weights))
}

/// Composition without the `[0, 1]` weight-range check. Used for
/// extrapolated weights, e.g. when probing linearity.
pub fn compose_unchecked(bank: &BlendshapeBank, weights: &[f64]) -> Mesh {
    let mut out = bank.neutral.vertices.clone();
    for (delta, &w) in bank.deltas.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, d) in out.iter_mut().zip(&delta.vertices.vertices) {
            *o += w * d;
        }
    }
    Mesh { vertices: out }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub name: String,
    #[serde(default = "default_min")]
    pub min: f64,
    #[serde(default = "default_max")]
    pub max: f64,
    #[serde(default)]
    pub neutral: f64,
}

fn default_min() -> f64 {
    0.0
}

fn default_max() -> f64 {
    1.0
}

impl ControllerSpec {
    /// A controller with the default `[0, 1]` range and neutral 0.
    pub fn unit(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            min: 0.0,
            max: 1.0,
            neutral: 0.0,
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }
}

/// A target character: its controllers and, optionally, a blendshape bank.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterRig {
    id: String,
    controllers: Vec<ControllerSpec>,
    bank: Option<BlendshapeBank>,
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    version: u32,
    id: String,
    controllers: Vec<ControllerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bank_path: Option<PathBuf>,
}

impl CharacterRig {
    pub fn new(
        id: impl Into<String>,
        controllers: Vec<ControllerSpec>,
        bank: Option<BlendshapeBank>,
    ) -> Result<Self> {
        let id = id.into();
        if controllers.is_empty() {
            return Err(Error::invalid(format!("rig '{id}' has no controllers")));
        }
        let mut names = HashSet::new();
        for c in &controllers {
            if !(c.min.is_finite() && c.max.is_finite() && c.neutral.is_finite()) {
                return Err(Error::invalid(format!("controller '{}' has non-finite range", c.name)));
            }
            if !(c.min <= c.neutral && c.neutral <= c.max) {
                return Err(Error::invalid(format!(
                    "controller '{}' violates min <= neutral <= max ({} {} {})",
                    c.name, c.min, c.neutral, c.max
                )));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate controller name '{}'", c.name)));
            }
        }
        Ok(Self {
            id,
            controllers,
            bank,
        })
    }

    /// A rig of `n` unit-range controllers named `c000`, `c001`, ...
    pub fn unit(id: impl Into<String>, n: usize) -> Result<Self> {
        let controllers = (0..n).map(|i| ControllerSpec::unit(format!("c{i:03}"))).collect();
        Self::new(id, controllers, None)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn controllers(&self) -> &[ControllerSpec] {
        &self.controllers
    }

    pub fn controller_count(&self) -> usize {
        self.controllers.len()
    }

    pub fn bank(&self) -> Option<&BlendshapeBank> {
        self.bank.as_ref()
    }

    pub fn neutral_values(&self) -> Vec<f64> {
        self.controllers.iter().map(|c| c.neutral).collect()
    }

    pub fn neutral_frame(&self, timestamp: f64) -> ControllerFrame {
        ControllerFrame {
            timestamp,
            values: self.neutral_values(),
        }
    }

    /// Loads a rig document; a relative `bank_path` resolves against the
    /// rig file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file: RigFile = io::read_json(path)?;
        io::check_version(path, file.version, RIG_FILE_VERSION)?;
        let bank = match &file.bank_path {
            Some(p) => Some(BlendshapeBank::load(&io::resolve_relative(path, p))?),
            None => None,
        };
        Self::new(file.id, file.controllers, bank).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes the rig document. The bank, if any, is not written; pass
    /// `bank_path` to reference one saved separately.
    pub fn save(&self, path: &Path, bank_path: Option<&Path>) -> Result<()> {
        io::write_json(
            path,
            &RigFile {
                version: RIG_FILE_VERSION,
                id: self.id.clone(),
                controllers: self.controllers.clone(),
                bank_path: bank_path.map(Path::to_path_buf),
            },
        )
    }
}

/// Controller values for one rig at one instant, in rig controller order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerFrame {
    pub timestamp: f64,
    pub values: Vec<f64>,
}

pub fn clamp_controllers(rig: &CharacterRig, raw: &[f64], timestamp: f64) -> Result<ControllerFrame> {
    if raw.len() != rig.controller_count() {
        return Err(Error::dim("controller vector", rig.controller_count(), raw.len()));
    }
    let values = rig
        .controllers
        .iter()
        .zip(raw)
        .map(|(spec, &v)| spec.clamp(v))
        .collect();
    Ok(ControllerFrame { timestamp, values })
}

/// Formats `x` with 9 significant digits, `%g`-style.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".to_string()
    } else {
        t.to_string()
    }
}

/// Renders the mesh as OBJ vertex lines (`v x y z`), LF terminated.
pub fn mesh_to_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 12);
    for v in mesh.vertices.chunks_exact(3) {
        let _ = writeln!(
            out,
            "v {} {} {}",
            format_sig9(v[0]),
            format_sig9(v[1]),
            format_sig9(v[2])
        );
    }
    out
}

pub fn export_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    io::write_string(path, &mesh_to_obj(mesh))
}

/// Reads `v` lines back from an OBJ file; other records are ignored.
pub fn import_mesh(path: &Path) -> Result<Mesh> {
    let text = io::read_to_string(path)?;
    let mut coords = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        for _ in 0..3 {
            let tok = parts
                .next()
                .ok_or_else(|| Error::format(path, format!("line {}: short vertex", lineno + 1)))?;
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number '{tok}'", lineno + 1)))?;
            coords.push(v);
        }
    }
    Mesh::new(coords).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bank(rng: &mut ChaCha8Rng, verts: usize, deltas: usize) -> BlendshapeBank {
        let mesh = |rng: &mut ChaCha8Rng| {
            Mesh::new((0..verts * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let neutral = mesh(rng);
        let deltas = (0..deltas)
            .map(|i| Delta {
                name: format!("d{i}"),
                vertices: mesh(rng),
            })
            .collect();
        BlendshapeBank::new(neutral, deltas).unwrap()
    }

    /// Per-vertex, per-axis loop; independent of the flat zip in `compose_unchecked`.
    fn compose_oracle(bank: &BlendshapeBank, w: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for v in 0..bank.neutral().vertex_count() {
            for axis in 0..3 {
                let mut acc = bank.neutral().vertex(v)[axis];
                for (i, d) in bank.deltas().iter().enumerate() {
                    acc += w[i] * d.vertices.vertex(v)[axis];
                }
                out.push(acc);
            }
        }
        out
    }

    #[test]
    fn zero_weights_copy_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = random_bank(&mut rng, 5, 3);
        let out = compose_blendshapes(&bank, &[0.0; 3]).unwrap();
        assert_eq!(&out, bank.neutral());
    }

    #[test]
    fn single_unit_weight_adds_first_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = random_bank(&mut rng, 5, 3);
        let out = compose_blendshapes(&bank, &[1.0, 0.0, 0.0]).unwrap();
        for (i, c) in out.coords().iter().enumerate() {
            assert_eq!(*c, bank.neutral().coords()[i] + bank.deltas()[0].vertices.coords()[i]);
        }
    }

    #[test]
    fn random_composition_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let bank = random_bank(&mut rng, 4, 3);
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let out = compose_blendshapes(&bank, &w).unwrap();
            for (a, b) in out.coords().iter().zip(compose_oracle(&bank, &w)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_rejects_bad_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = random_bank(&mut rng, 2, 2);
        assert!(matches!(
            compose_blendshapes(&bank, &[0.5]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            compose_blendshapes(&bank, &[0.5, f64::NAN]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bank_rejects_mismatched_delta() {
        let neutral = Mesh::new(vec![0.0; 6]).unwrap();
        let bad = Delta {
            name: "x".into(),
            vertices: Mesh::new(vec![0.0; 3]).unwrap(),
        };
        assert!(BlendshapeBank::new(neutral, vec![bad]).is_err());
        assert!(Mesh::new(vec![0.0; 4]).is_err());
    }

    #[test]
    fn clamp_examples() {
        let rig = CharacterRig::new(
            "r",
            vec![
                ControllerSpec::unit("a"),
                ControllerSpec {
                    name: "b".into(),
                    min: -1.0,
                    max: 2.0,
                    neutral: 0.5,
                },
            ],
            None,
        )
        .unwrap();
        let inside = clamp_controllers(&rig, &[0.3, -0.5], 0.0).unwrap();
        assert_eq!(inside.values, vec![0.3, -0.5]);
        let neutral = clamp_controllers(&rig, &rig.neutral_values(), 1.0).unwrap();
        assert_eq!(neutral, rig.neutral_frame(1.0));
        let clipped = clamp_controllers(&rig, &[1.7, -3.0], 0.0).unwrap();
        assert_eq!(clipped.values, vec![1.0, -1.0]);
        let again = clamp_controllers(&rig, &clipped.values, 0.0).unwrap();
        assert_eq!(again, clipped);
        assert!(matches!(
            clamp_controllers(&rig, &[0.0], 0.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rig_validation() {
        assert!(CharacterRig::new("r", vec![], None).is_err());
        let bad = ControllerSpec {
            name: "a".into(),
            min: 0.0,
            max: 1.0,
            neutral: 2.0,
        };
        assert!(CharacterRig::new("r", vec![bad], None).is_err());
        let dup = vec![ControllerSpec::unit("a"), ControllerSpec::unit("a")];
        assert!(CharacterRig::new("r", dup, None).is_err());
    }

    #[test]
    fn rig_file_defaults_and_bank_path() {
        let dir = tempfile::tempdir().unwrap();
        let bank = BlendshapeBank::new(
            Mesh::new(vec![0.0, 1.0, 2.0]).unwrap(),
            vec![Delta {
                name: "smile".into(),
                vertices: Mesh::new(vec![0.5, 0.0, -0.25]).unwrap(),
            }],
        )
        .unwrap();
        bank.save(&dir.path().join("bank.json")).unwrap();
        std::fs::write(
            dir.path().join("rig.json"),
            r#"{"version":1,"id":"mery","controllers":[{"name":"jaw"},{"name":"brow","min":-1,"max":1}],"bank_path":"bank.json"}"#,
        )
        .unwrap();
        let rig = CharacterRig::load(&dir.path().join("rig.json")).unwrap();
        assert_eq!(rig.id(), "mery");
        assert_eq!(rig.controllers()[0], ControllerSpec::unit("jaw"));
        assert_eq!(rig.controllers()[1].min, -1.0);
        assert_eq!(rig.bank(), Some(&bank));

        std::fs::write(dir.path().join("v2.json"), r#"{"version":2,"id":"x","controllers":[{"name":"a"}]}"#).unwrap();
        assert!(matches!(
            CharacterRig::load(&dir.path().join("v2.json")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.1), "0.1");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.0), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(format_sig9(1.5e-7), "1.5e-7");
    }

    #[test]
    fn one_vertex_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        export_mesh(&Mesh::new(vec![0.0; 3]).unwrap(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "v 0 0 0\n");
    }

    #[test]
    fn neutral_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.obj");
        let mesh = Mesh::new(vec![0.125, -3.5, 2.0, 1e-3, 42.25, -0.0078125]).unwrap();
        export_mesh(&mesh, &path).unwrap();
        assert_eq!(import_mesh(&path).unwrap(), mesh);
    }

    #[test]
    fn composed_export_matches_oracle_export() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = random_bank(&mut rng, 6, 4);
        let w = [0.1, 0.9, 0.0, 0.5];
        let composed = compose_blendshapes(&bank, &w).unwrap();
        let oracle = Mesh::new(compose_oracle(&bank, &w)).unwrap();
        assert_eq!(mesh_to_obj(&composed), mesh_to_obj(&oracle));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn composition_is_linear(
                seed in 0u64..1000,
                a in -2.0f64..2.0,
                b in -2.0f64..2.0,
                u in proptest::collection::vec(-1.0f64..1.0, 3),
                v in proptest::collection::vec(-1.0f64..1.0, 3),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bank = random_bank(&mut rng, 4, 3);
                let base = compose_unchecked(&bank, &[0.0; 3]);
                let delta = |w: &[f64]| -> Vec<f64> {
                    compose_unchecked(&bank, w).coords().iter().zip(base.coords()).map(|(x, y)| x - y).collect()
                };
                let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
                let lhs = delta(&mix);
                let du = delta(&u);
                let dv = delta(&v);
                for i in 0..lhs.len() {
                    prop_assert!((lhs[i] - (a * du[i] + b * dv[i])).abs() < 1e-9);
                }
            }

            #[test]
            fn compose_is_pure(seed in 0u64..1000, w in proptest::collection::vec(0.0f64..=1.0, 3)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bank = random_bank(&mut rng, 4, 3);
                let before = bank.clone();
                let x = compose_blendshapes(&bank, &w).unwrap();
                let y = compose_blendshapes(&bank, &w).unwrap();
                prop_assert_eq!(&bank, &before);
                for (p, q) in x.coords().iter().zip(y.coords()) {
                    prop_assert_eq!(p.to_bits(), q.to_bits());
                }
            }

            #[test]
            fn clamp_is_idempotent(raw in proptest::collection::vec(-5.0f64..5.0, 4)) {
                let rig = CharacterRig::unit("r", 4).unwrap();
                let once = clamp_controllers(&rig, &raw, 0.0).unwrap();
                let twice = clamp_controllers(&rig, &once.values, 0.0).unwrap();
                prop_assert_eq!(once, twice);
            }
        }
    }
}
