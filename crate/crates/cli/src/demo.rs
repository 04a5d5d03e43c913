//! Synthetic session data: rigs, tracker stream, ground-truth controller
//! tracks and expression databases, all derived from one seed.

use std::path::{Path, PathBuf};

use facerig_core::neural::{InputLayout, ModelMetadata, NetworkModel};
use facerig_core::retarget::{SecondaryEntry, HISTORY_LEN};
use facerig_core::rig::Delta;
use facerig_core::stream::{write_frames, write_outputs, OutputRecord};
use facerig_core::synth::{random_database, smooth_weight_stream, AdaptionGroundTruth, SecondaryGroundTruth};
use facerig_core::{BlendshapeBank, CharacterRig, ChannelList, ControllerFrame, Mesh, PipelineManifest, SourceTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const PRIMARY_ID: &str = "hero";
pub const SECONDARIES: [(&str, usize); 3] = [("imp", 80), ("ogre", 60), ("troll", 40)];
/// First-order smoothing of the synthetic adaption ground truth.
pub const TRUTH_SMOOTHING: f64 = 0.5;
const BANK_VERTICES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSpec {
    pub seed: u64,
    pub frames: usize,
    pub controllers: usize,
    pub records: usize,
    pub fps: f64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 2000,
            controllers: 100,
            records: 500,
            fps: 24.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub stream: PathBuf,
    pub truth: PathBuf,
    pub secondary_truth: Vec<PathBuf>,
    pub human_db: PathBuf,
    pub character_db: PathBuf,
    pub frames: usize,
}

/// One ChaCha stream per artifact.
fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn as_records(id: &str, frames: &[ControllerFrame]) -> Vec<OutputRecord> {
    frames.iter().map(|f| OutputRecord::new(id, f, false)).collect()
}

pub fn write_demo(dir: &Path, spec: &DemoSpec) -> CliResult<DemoSummary> {
    if spec.frames < 4 || spec.controllers == 0 || spec.records == 0 || !(spec.fps > 0.0) {
        return Err(CliError::Usage(
            "demo needs at least 4 frames, 1 controller, 1 record and a positive fps".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        what: format!("cannot create {}", dir.display()),
        source,
    })?;
    let channels = ChannelList::arkit52().len();
    let p = |name: &str| dir.join(name);

    let mut r = rng(spec.seed, 1);
    let deltas = (0..spec.controllers)
        .map(|i| {
            let v = (0..3 * BANK_VERTICES).map(|_| r.gen_range(-0.05..0.05)).collect();
            Ok(Delta {
                name: format!("c{i:03}"),
                vertices: Mesh::new(v)?,
            })
        })
        .collect::<facerig_core::Result<Vec<_>>>()?;
    let neutral = Mesh::new((0..3 * BANK_VERTICES).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    BlendshapeBank::new(neutral, deltas)?.save(&p("hero_bank.json"))?;
    let hero = CharacterRig::unit(PRIMARY_ID, spec.controllers)?;
    hero.save(&p("hero.json"), Some(Path::new("hero_bank.json")))?;
    for (id, n) in SECONDARIES {
        CharacterRig::unit(id, n)?.save(&p(&format!("{id}.json")), None)?;
    }

    let frames = smooth_weight_stream(&mut rng(spec.seed, 2), channels, spec.frames, spec.fps);
    write_frames(&p("stream.ndjson"), &frames)?;
    let truth = AdaptionGroundTruth::new(&mut rng(spec.seed, 3), channels, spec.controllers, TRUTH_SMOOTHING)
        .controllers(&frames);
    write_outputs(&p("truth.ndjson"), &as_records(PRIMARY_ID, &truth))?;
    let mut secondary_truth = Vec::new();
    for (k, (id, n)) in SECONDARIES.into_iter().enumerate() {
        let map = SecondaryGroundTruth::new(&mut rng(spec.seed, 10 + k as u64), spec.controllers, n);
        let track: Vec<ControllerFrame> = truth
            .iter()
            .map(|f| ControllerFrame {
                timestamp: f.timestamp,
                values: map.map(&f.values),
            })
            .collect();
        let path = p(&format!("secondary_{id}.ndjson"));
        write_outputs(&path, &as_records(id, &track))?;
        secondary_truth.push(path);
    }

    let mut r = rng(spec.seed, 4);
    random_database(&mut r, spec.records, "h", SourceTag::Human).save(&p("human.db"))?;
    random_database(&mut r, spec.records, "c", SourceTag::Character(PRIMARY_ID.into())).save(&p("character.db"))?;

    let manifest = PipelineManifest {
        version: 1,
        channels: None,
        primary_rig: "hero.json".into(),
        adaption_model: "adaption.json".into(),
        secondaries: SECONDARIES
            .iter()
            .map(|(id, _)| SecondaryEntry {
                rig: format!("{id}.json").into(),
                model: format!("{id}_model.json").into(),
            })
            .collect(),
        calibration: None,
        target_fps: spec.fps,
        stale_timeout_ms: 200,
    };
    manifest.save(&p("manifest.json"))?;

    Ok(DemoSummary {
        dir: dir.to_path_buf(),
        manifest: p("manifest.json"),
        stream: p("stream.ndjson"),
        truth: p("truth.ndjson"),
        secondary_truth,
        human_db: p("human.db"),
        character_db: p("character.db"),
        frames: spec.frames,
    })
}

/// Writes freshly initialised (untrained) adaption and secondary models
/// matching a demo session, so the manifest loads without training.
pub fn write_initial_models(dir: &Path, controllers: usize, hidden: usize, seed: u64) -> CliResult<()> {
    let channels = ChannelList::arkit52().len();
    let layout = InputLayout {
        channels,
        controllers,
        history: HISTORY_LEN,
    };
    let meta = ModelMetadata {
        name: "adaption".into(),
        character_ids: vec![PRIMARY_ID.into()],
        seed,
        input_layout: Some(layout),
    };
    NetworkModel::init(&[layout.input_dim(), hidden, hidden, controllers], seed, meta)?.save(&dir.join("adaption.json"))?;
    for (k, (id, n)) in SECONDARIES.into_iter().enumerate() {
        let meta = ModelMetadata {
            name: format!("{PRIMARY_ID}->{id}"),
            character_ids: vec![PRIMARY_ID.into(), id.into()],
            ..Default::default()
        };
        NetworkModel::init(&[controllers, hidden, hidden, n], seed + 1 + k as u64, meta)?
            .save(&dir.join(format!("{id}_model.json")))?;
    }
    Ok(())
}
