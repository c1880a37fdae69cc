//! Finite-difference checks of every network module and of the whole
//! pipeline on desk shapes, shared by the tests and the command-line tool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timealign_nn::{gradcheck, ops, GradcheckOptions, GradcheckReport, NnError, ParamStore, Params, Tensor, Var};

use crate::bev_encoder::{BevEncoder, BevSpec, PILLAR_CHANNELS};
use crate::detection_head::{detection_loss, encode_targets, Box3D, DetectionHead, Targets};
use crate::error::{Error, Result};
use crate::fusion::{AlignBranch, BranchOutput, Combine, GlobalFuse};
use crate::predictor::{prediction_loss, HistoryFeed, Predictor, PredictorConfig, SwinLstmCell, SwinLstmState};
use crate::scene_sim::ObjectClass;
use crate::train_eval::model::{BatchInput, Model};
use crate::temporal_data::HISTORY_LEN;
use crate::train_eval::{DataConfig, Dataset, ModelConfig, Variant};

pub const MODULES: [&str; 9] = [
    "encoder",
    "predictor_cell",
    "predictor",
    "predictor_autoregressive",
    "align_branch",
    "combine",
    "global_fuse",
    "head",
    "pipeline",
];

pub const TOLERANCE: f64 = 1e-4;

/// Entries sampled per tensor; desk tensors are too large to sweep fully.
const ENTRIES: usize = 6;

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: String,
    pub seed: u64,
    pub report: GradcheckReport,
}

fn nn(e: Error) -> NnError {
    match e {
        Error::Nn(inner) => inner,
        other => NnError::Config(other.to_string()),
    }
}

fn project(out: &Var, seed: u64) -> timealign_nn::Result<Var> {
    let w = Tensor::randn(out.shape().to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    ops::weighted_sum(out, &w)
}

/// Add uniform noise in `±scale` so that zero-initialized layers (offset
/// heads, residual inflate) are exercised away from their special points.
/// With `only_zero`, tensors that already hold values are left alone.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64, only_zero: bool) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed");
        if only_zero && t.data().iter().any(|&v| v != 0.0) {
            continue;
        }
        for v in t.data_mut() {
            *v += scale * rng.gen::<f64>().mul_add(2.0, -1.0);
        }
    }
}

fn desk() -> ModelConfig {
    ModelConfig::desk(Variant::TimeAlign)
}

fn feature(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    let spec = BevSpec::desk();
    Tensor::randn(vec![1, c, spec.height(), spec.width()], 1.0, rng)
}

fn random_targets(rng: &mut ChaCha8Rng, spec: &BevSpec) -> Result<Targets> {
    let boxes: Vec<Box3D> = (0..4)
        .map(|k| {
            let class = ObjectClass::ALL[k % ObjectClass::ALL.len()];
            let size = class.size_prior();
            Box3D {
                center: [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), size[2] / 2.0],
                size,
                yaw: rng.gen_range(-3.0..3.0),
                class,
                score: 1.0,
                velocity: None,
            }
        })
        .collect();
    encode_targets(&boxes, spec, ObjectClass::ALL.len())
}

/// Check one module at one seed.
pub fn check_module(module: &str, seed: u64) -> Result<GradcheckReport> {
    let cfg = desk();
    let c = cfg.lidar_channels();
    let cc = cfg.camera_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let opts = GradcheckOptions {
        seed,
        ..GradcheckOptions::default()
    }
    .with_tolerance(TOLERANCE)
    .with_max_entries(ENTRIES);

    let report = match module {
        "encoder" => {
            let enc = BevEncoder::new("encoder", cfg.encoder);
            enc.init(&mut store, &mut rng)?;
            let x = feature(&mut rng, PILLAR_CHANNELS);
            gradcheck(&store, &[x], &opts, |p, i| project(&enc.forward(p, &i[0]).map_err(nn)?, seed))?
        }
        "predictor_cell" => {
            let pc = cfg.predictor;
            let cell = SwinLstmCell::new("cell", &pc)?;
            cell.init(&mut store, &mut rng)?;
            perturb(&mut store, &mut rng, 0.05, false);
            // a 4 x 4 token grid of desk width
            let grid = (pc.window_size, pc.window_size);
            let shape = vec![1, grid.0 * grid.1, pc.embed_dim];
            let ins: Vec<Tensor> = (0..3).map(|_| Tensor::randn(shape.clone(), 1.0, &mut rng)).collect();
            gradcheck(&store, &ins, &opts, |p, i| {
                let state = SwinLstmState {
                    hidden: i[1].clone(),
                    memory: i[2].clone(),
                };
                let (h, next) = cell.step(p, &i[0], &state, grid).map_err(nn)?;
                ops::add(&project(&h, seed)?, &project(&next.memory, seed + 1)?)
            })?
        }
        "predictor" | "predictor_autoregressive" => {
            let feed = if module == "predictor" {
                HistoryFeed::TeacherForced
            } else {
                HistoryFeed::Autoregressive
            };
            let pred = Predictor::new("predictor", PredictorConfig { feed, ..cfg.predictor })?;
            pred.init(&mut store, &mut rng)?;
            perturb(&mut store, &mut rng, 0.05, false);
            let ins: Vec<Tensor> = (0..3).map(|_| feature(&mut rng, c)).collect();
            let labels: Vec<Tensor> = (0..3).map(|_| feature(&mut rng, c)).collect();
            gradcheck(&store, &ins, &opts, |p, i| {
                prediction_loss(&pred.rollout(p, i).map_err(nn)?, &labels).map_err(nn)
            })?
        }
        "align_branch" => {
            let branch = AlignBranch::new("align.pred", cfg.fusion);
            branch.init(&mut store, &mut rng)?;
            perturb(&mut store, &mut rng, 0.05, false);
            let ins = vec![feature(&mut rng, c), feature(&mut rng, cc)];
            gradcheck(&store, &ins, &opts, |p, i| {
                let out = branch.forward(p, &i[0], &i[1]).map_err(nn)?;
                project(&out.realigned, seed)
            })?
        }
        "combine" => {
            let comb = Combine::new("fuse.combine", cfg.fusion);
            comb.init(&mut store, &mut rng)?;
            let ins = vec![feature(&mut rng, c), feature(&mut rng, c)];
            let branch = |v: &Var| BranchOutput {
                realigned: v.clone(),
                offsets: v.clone(),
                modulation: v.clone(),
                concat_shape: Vec::new(),
            };
            gradcheck(&store, &ins, &opts, |p, i| {
                project(&comb.forward(p, &branch(&i[0]), &branch(&i[1])).map_err(nn)?, seed)
            })?
        }
        "global_fuse" => {
            let fuse = GlobalFuse::new("fuse.global", cfg.fusion);
            fuse.init(&mut store, &mut rng)?;
            let ins = vec![feature(&mut rng, c), feature(&mut rng, cc)];
            gradcheck(&store, &ins, &opts, |p, i| project(&fuse.forward(p, &i[0], &i[1]).map_err(nn)?, seed))?
        }
        "head" => {
            let head = DetectionHead::new("head", cfg.head);
            head.init(&mut store, &mut rng)?;
            let targets = random_targets(&mut rng, &cfg.bev)?;
            let x = feature(&mut rng, cfg.head.in_channels);
            gradcheck(&store, &[x], &opts, |p, i| {
                detection_loss(&head.forward(p, &i[0]).map_err(nn)?, &targets).map_err(nn)
            })?
        }
        "pipeline" => {
            // F_p is not detached, so the detection loss reaches the predictor
            let model = Model::new(ModelConfig {
                detach_prediction: false,
                ..cfg
            })?;
            let mut store = model.init(seed)?;
            perturb(&mut store, &mut rng, 0.05, true);
            // a simulated desk sample keeps the loss at its usual scale
            let data = Dataset::simulate(&DataConfig {
                num_scenes: 1,
                seed,
                ..DataConfig::default()
            })?;
            let sample = data.prepare(0, HISTORY_LEN)?;
            let input = BatchInput::from_samples(&[&sample], &[1])?;
            // The prediction labels are encoder outputs held constant, so
            // only the detection objective is a function of the parameters.
            // It is scaled to 1 at the checked point: the error floor is
            // absolute and rounding in a loss near 100 swamps gradients of
            // 1e-6 at this step.
            let objective = |p: &Params| -> Result<Var> {
                let out = model.forward(p, &input)?;
                Ok(model.losses(&out, &sample.targets)?.0)
            };
            let scale = 1.0 / objective(&Params::new(&store, false))?.value().item();
            gradcheck(&store, &[], &opts, |p, _| Ok(ops::scale(&objective(p).map_err(nn)?, scale)))?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown module `{}`; expected one of {}",
                other,
                MODULES.join(", ")
            )))
        }
    };
    Ok(report)
}

/// Every `(module, seed)` pair, in order.
pub fn run(modules: &[&str], seeds: &[u64]) -> Result<Vec<ModuleCheck>> {
    let mut out = Vec::with_capacity(modules.len() * seeds.len());
    for &m in modules {
        for &seed in seeds {
            out.push(ModuleCheck {
                module: m.to_string(),
                seed,
                report: check_module(m, seed)?,
            });
        }
    }
    Ok(out)
}
