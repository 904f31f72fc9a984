use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::{
    BenchArgs, CafFlags, Command, DataArgs, DataFlags, EvalArgs, SanityArgs, TrainArgs, TrainKind, VisualizeArgs,
};
use crate::attention::{self, CafConfig, Heatmap};
use crate::baselines::SaliencyMap;
use crate::data::{self, ShapeKind, ShapesConfig};
use crate::error::{Error, Result};
use crate::evaluation::{self, estimate_box, iou, BoundingBox};
use crate::imageio;
use crate::network::{self, presets, NetworkModel, Preset, RetrievalLoss, TrainConfig, TrainReport};
use crate::pipeline::{self, image_id, Method, SanityScope, WsolConfig};
use crate::tensor::Tensor;

/// Sequences move at most this many pixels per frame on each axis.
const MAX_SPEED: usize = 2;

pub(super) fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(&a),
        Command::Visualize(a) => visualize(&a),
        Command::EvalWsol(a) => eval_wsol(&a),
        Command::Bench(a) => bench(&a),
        Command::Sanity(a) => sanity(&a),
        Command::Data(a) => dump_data(&a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Collects CSV rows in memory and writes the file in one go.
struct CsvFile {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl CsvFile {
    fn new(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut f = CsvFile {
            path,
            writer: csv::Writer::from_writer(Vec::new()),
        };
        f.row(header)?;
        Ok(f)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.writer
            .write_record(fields)
            .map_err(|e| Error::io(&self.path, std::io::Error::other(e)))
    }

    fn finish(self) -> Result<()> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| Error::io(&self.path, std::io::Error::other(e.to_string())))?;
        write_file(&self.path, &bytes)
    }
}

fn shapes_config(classes: u64, noise: f64, height: usize, width: usize) -> ShapesConfig {
    ShapesConfig {
        height,
        width,
        classes: ShapeKind::ALL[..classes as usize].to_vec(),
        noise_sigma: noise,
        ..ShapesConfig::default()
    }
}

fn wsol_config(f: &CafFlags) -> Result<WsolConfig> {
    let caf = CafConfig {
        lr: f.lr,
        epsilon: f.epsilon,
        d: f.d,
        max_iters: f.max_iters,
        seed: f.seed,
    };
    caf.validate()?;
    if !(f.theta > 0.0 && f.theta < 1.0) {
        return Err(Error::invalid(format!("theta must lie in (0, 1), got {}", f.theta)));
    }
    Ok(WsolConfig {
        caf,
        theta_frac: f.theta,
        at_layer: f.layer,
        ..WsolConfig::default()
    })
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let methods: Vec<Method> = names.iter().map(|n| n.trim().parse()).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::invalid("no methods given"));
    }
    Ok(methods)
}

fn still_images(model: &NetworkModel, d: &DataFlags) -> Result<Vec<data::SyntheticSample>> {
    if model.frames().is_some() {
        return Err(Error::Incompatible("this command needs a single-image model".into()));
    }
    let s = model.input_shape();
    data::generate_shapes(d.n_images as usize, &shapes_config(d.classes, d.noise, s[0], s[1]), d.data_seed)
}

fn fmt_box(b: Option<BoundingBox>) -> [String; 4] {
    match b {
        Some(b) => [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v.to_string()),
        None => Default::default(),
    }
}

fn write_loss_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = CsvFile::new(path.to_path_buf(), &["epoch", "train_loss", "monitor_loss"])?;
    csv.row(&["0".to_string(), String::new(), report.monitor_initial.to_string()])?;
    let last = report.epoch_losses.len();
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        let monitor = if e + 1 == last {
            report.monitor_final.to_string()
        } else {
            String::new()
        };
        csv.row(&[(e + 1).to_string(), loss.to_string(), monitor])?;
    }
    csv.finish()
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let n = a.n_train as usize;
    let classes = a.classes as usize;
    let still = shapes_config(a.classes, 0.1, presets::IMAGE_SIZE, presets::IMAGE_SIZE);
    let (model, report) = match a.kind {
        TrainKind::Cls => {
            let (x, y) = data::inputs_and_labels(&data::generate_shapes(n, &still, a.data_seed)?);
            network::train_classifier(&presets::tiny_cls(classes, a.seed)?, &x, &y, &cfg)?
        }
        TrainKind::RetTriplet | TrainKind::RetNpair => {
            let (x, y) = data::inputs_and_labels(&data::generate_shapes(n, &still, a.data_seed)?);
            let (normalize, loss) = if a.kind == TrainKind::RetTriplet {
                (true, RetrievalLoss::Triplet { margin: a.margin })
            } else {
                (false, RetrievalLoss::NPair)
            };
            let model = presets::tiny_ret(presets::EMBED_DIM, normalize, a.seed)?;
            network::train_retrieval(&model, &x, &y, loss, &cfg)?
        }
        TrainKind::Rnn => {
            let frames = shapes_config(a.classes, 0.1, presets::FRAME_SIZE, presets::FRAME_SIZE);
            let seqs = data::generate_sequence(n, presets::RNN_FRAMES, &frames, MAX_SPEED, a.data_seed)?;
            let x: Vec<Tensor> = seqs.iter().map(|s| s.frames.clone()).collect();
            let y: Vec<usize> = seqs.iter().map(|s| s.class).collect();
            let model = presets::tiny_rnn(presets::RNN_FRAMES, presets::RNN_HIDDEN, a.seed)?;
            network::train_retrieval(&model, &x, &y, RetrievalLoss::Triplet { margin: a.margin }, &cfg)?
        }
    };
    network::save_model(&model, &a.out)?;
    let log = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_loss_log(&log, &report)?;
    println!(
        "trained {:?} for {} epochs: monitor loss {:.6} -> {:.6}",
        a.kind, a.epochs, report.monitor_initial, report.monitor_final
    );
    println!("model: {}\nlog: {}", a.out.display(), log.display());
    Ok(())
}

/// Heatmap, box and overlay of one (image, method) pair.
struct Rendered {
    id: String,
    frame: Option<usize>,
    method: Method,
    heat: Heatmap,
    bbox: Option<BoundingBox>,
    truth: Option<BoundingBox>,
    image: Tensor,
}

fn render(image: &Tensor, map: &SaliencyMap, theta: f64) -> Result<(Heatmap, Option<BoundingBox>)> {
    let heat = map.to_heatmap((image.shape()[0], image.shape()[1]))?;
    let bbox = estimate_box(&heat, theta)?;
    Ok((heat, bbox))
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let model = network::load_model(&a.model)?;
    let methods = parse_methods(&a.method)?;
    pipeline::check_compatible(&model, &methods)?;
    let cfg = wsol_config(&a.caf)?;
    let rendered = match model.frames() {
        Some(t) => visualize_sequences(&model, a, &methods, &cfg, t)?,
        None => visualize_images(&model, a, &methods, &cfg)?,
    };

    create_dir(&a.out_dir)?;
    let mut csv = CsvFile::new(
        a.out_dir.join("boxes.csv"),
        &["image_id", "frame", "method", "x_min", "y_min", "x_max", "y_max", "iou"],
    )?;
    for r in &rendered {
        let stem = match r.frame {
            Some(t) => format!("{}_t{t}_{}", r.id, r.method),
            None => format!("{}_{}", r.id, r.method),
        };
        write_file(&a.out_dir.join(format!("{stem}.pgm")), &imageio::encode_pgm(&r.heat))?;
        let over = imageio::overlay(&r.image, &r.heat, r.bbox)?;
        write_file(&a.out_dir.join(format!("{stem}.ppm")), &imageio::encode_ppm(&over)?)?;
        let overlap = match (r.bbox, r.truth) {
            (Some(b), Some(t)) => format!("{:.6}", iou(&b, &t)),
            (None, Some(_)) => format!("{:.6}", 0.0),
            _ => String::new(),
        };
        let [x0, y0, x1, y1] = fmt_box(r.bbox);
        let frame = r.frame.map(|t| t.to_string()).unwrap_or_default();
        csv.row(&[r.id.clone(), frame, r.method.name(), x0, y0, x1, y1, overlap])?;
    }
    csv.finish()?;
    println!("wrote {} heatmaps to {}", rendered.len(), a.out_dir.display());
    Ok(())
}

fn visualize_images(model: &NetworkModel, a: &VisualizeArgs, methods: &[Method], cfg: &WsolConfig) -> Result<Vec<Rendered>> {
    if a.frames.is_some() {
        return Err(Error::Incompatible("--frames needs a recurrent (sequence) model".into()));
    }
    let inputs: Vec<(Tensor, Option<BoundingBox>)> = if a.images.is_empty() {
        still_images(model, &a.data)?.into_iter().map(|s| (s.image, Some(s.bbox))).collect()
    } else {
        let mut v = Vec::new();
        for p in &a.images {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let img = imageio::decode_ppm(&bytes)?;
            if img.shape() != model.input_shape() {
                return Err(Error::Incompatible(format!(
                    "{} is {:?}, model expects {:?}",
                    p.display(),
                    img.shape(),
                    model.input_shape()
                )));
            }
            v.push((img, None));
        }
        v
    };
    let per_image: Vec<Vec<Rendered>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, (x, truth))| {
            let class = match a.class {
                Some(c) => Some(c),
                None if model.head().is_logits() => Some(model.predict(x)?.argmax()),
                None => None,
            };
            methods
                .iter()
                .map(|&m| {
                    let map = pipeline::saliency(model, x, m, class, cfg)?;
                    let (heat, bbox) = render(x, &map, cfg.theta_frac)?;
                    Ok(Rendered {
                        id: image_id(i),
                        frame: None,
                        method: m,
                        heat,
                        bbox,
                        truth: *truth,
                        image: x.clone(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

fn visualize_sequences(
    model: &NetworkModel,
    a: &VisualizeArgs,
    methods: &[Method],
    cfg: &WsolConfig,
    model_frames: usize,
) -> Result<Vec<Rendered>> {
    let frames = a.frames.unwrap_or(model_frames);
    if frames != model_frames {
        return Err(Error::Incompatible(format!("model takes {model_frames} frames, --frames is {frames}")));
    }
    if !a.images.is_empty() {
        return Err(Error::Incompatible("recurrent models take generated sequences, not --image".into()));
    }
    let s = model.input_shape();
    let seqs = data::generate_sequence(
        a.data.n_images as usize,
        frames,
        &shapes_config(a.data.classes, a.data.noise, s[0], s[1]),
        MAX_SPEED,
        a.data.data_seed,
    )?;
    let per_seq: Vec<Vec<Rendered>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            // Both L2-CAF variants run the same per-frame optimization here.
            let results = attention::optimize_recurrent_sequence(model, &seq.frames, &cfg.caf)?;
            let images = seq.frames.unstack();
            let mut out = Vec::new();
            for &m in methods {
                for (t, r) in results.iter().enumerate() {
                    let (heat, bbox) = render(&images[t], &SaliencyMap::from_caf(r)?, cfg.theta_frac)?;
                    out.push(Rendered {
                        id: image_id(i),
                        frame: Some(t),
                        method: m,
                        heat,
                        bbox,
                        truth: Some(seq.boxes[t]),
                        image: images[t].clone(),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

fn eval_wsol(a: &EvalArgs) -> Result<()> {
    let model = network::load_model(&a.model)?;
    let methods = parse_methods(&a.methods)?;
    pipeline::check_compatible(&model, &methods)?;
    let cfg = wsol_config(&a.caf)?;
    if a.top_k == 0 {
        return Err(Error::invalid("--top-k must be at least 1"));
    }
    let samples = still_images(&model, &a.data)?;
    let (records, nmi, metric) = if model.head().is_logits() {
        let r = pipeline::evaluate_classification(&model, &samples, &methods, &cfg, a.top_k)?;
        (r, None, format!("top{}", a.top_k))
    } else {
        let (r, scores) = pipeline::evaluate_retrieval(&model, &samples, &methods, &cfg)?;
        (r, Some(scores.nmi), "r1".to_string())
    };
    let summary = pipeline::summarize(&records, &methods, nmi)?;

    create_dir(&a.out_dir)?;
    let mut buf = Vec::new();
    evaluation::write_records_csv(&mut buf, &records)?;
    write_file(&a.out_dir.join("records.csv"), &buf)?;
    let mut csv = CsvFile::new(
        a.out_dir.join("summary.csv"),
        &["method", "metric", "prediction", "nmi", "loc", "delta"],
    )?;
    println!("{:<14} {:>8} {:>8} {:>8} {:>8}", "method", metric, "nmi", "loc", "delta");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for s in &summary {
        csv.row(&[
            s.method.clone(),
            metric.clone(),
            format!("{:.6}", s.prediction),
            opt(s.nmi),
            format!("{:.6}", s.loc),
            opt(s.delta),
        ])?;
        let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<14} {:>8.4} {:>8} {:>8.4} {:>8}",
            s.method,
            s.prediction,
            show(s.nmi),
            s.loc,
            show(s.delta)
        );
    }
    csv.finish()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench(a: &BenchArgs) -> Result<()> {
    let model = match (&a.model, &a.preset) {
        (Some(p), _) => network::load_model(p)?,
        (None, Some(name)) => name.parse::<Preset>()?.build(a.model_seed)?,
        (None, None) => return Err(Error::invalid("give --model or --preset")),
    };
    if a.data.n_images < 10 {
        return Err(Error::invalid("bench needs at least 10 images for stable medians"));
    }
    let cfg = wsol_config(&a.caf)?;
    let samples = still_images(&model, &a.data)?;
    let methods = [Method::L2Caf, Method::L2CafFast, Method::GradCam];
    let mut times = vec![Vec::new(); methods.len()];
    let mut identical = true;
    let mut csv = CsvFile::new(a.out_dir.join("timing.csv"), &["image_id", "method", "seconds"])?;
    let mut rows = Vec::new();
    // Sequential on purpose: timings should not compete for cores.
    for (i, s) in samples.iter().enumerate() {
        let class = if model.head().is_logits() {
            Some(model.predict(&s.image)?.argmax())
        } else {
            None
        };
        let mut grids = Vec::new();
        for (k, &m) in methods.iter().enumerate() {
            let start = Instant::now();
            let map = pipeline::saliency(&model, &s.image, m, class, &cfg)?;
            let secs = start.elapsed().as_secs_f64();
            times[k].push(secs);
            rows.push([image_id(i), m.name(), format!("{secs:.9}")]);
            grids.push(map.grid().clone());
        }
        identical &= grids[0].bitwise_eq(&grids[1]);
    }
    create_dir(&a.out_dir)?;
    for r in &rows {
        csv.row(r)?;
    }
    csv.finish()?;

    let medians: Vec<f64> = times.iter_mut().map(|t| median(t)).collect();
    let mut summary = CsvFile::new(
        a.out_dir.join("summary.csv"),
        &["method", "median_seconds", "speedup_vs_l2caf"],
    )?;
    for (m, med) in methods.iter().zip(&medians) {
        let speedup = medians[0] / med;
        summary.row(&[m.name(), format!("{med:.9}"), format!("{speedup:.3}")])?;
        println!("{:<12} median {:.6}s  speedup {:.2}x", m.name(), med, speedup);
    }
    summary.finish()?;
    println!("fast and vanilla heatmaps identical: {identical}");
    Ok(())
}

fn sanity(a: &SanityArgs) -> Result<()> {
    let model = network::load_model(&a.model)?;
    if !model.head().is_logits() {
        return Err(Error::Incompatible("sanity checks need a classification model".into()));
    }
    let scopes: Vec<SanityScope> = a.scopes.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?;
    let cfg = wsol_config(&a.caf)?;
    let images: Vec<Tensor> = still_images(&model, &a.data)?.into_iter().map(|s| s.image).collect();
    let rows = pipeline::sanity_check(&model, &images, &scopes, a.trials as usize, a.random_seed, &cfg)?;

    create_dir(&a.out_dir)?;
    let mut csv = CsvFile::new(a.out_dir.join("sanity.csv"), &["image_id", "scope", "seed", "spearman"])?;
    for r in &rows {
        csv.row(&[
            r.image_id.clone(),
            r.scope.name().to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.spearman),
        ])?;
    }
    csv.finish()?;
    for scope in &scopes {
        let v: Vec<f64> = rows.iter().filter(|r| r.scope == *scope).map(|r| r.spearman).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let below = v.iter().filter(|&&c| c < 0.5).count();
        println!(
            "{:<10} mean spearman {:.4}  below 0.5 in {}/{} trials",
            scope.name(),
            mean,
            below,
            v.len()
        );
    }
    Ok(())
}

fn dump_data(a: &DataArgs) -> Result<()> {
    let d = &a.data;
    let cfg = shapes_config(d.classes, d.noise, presets::IMAGE_SIZE, presets::IMAGE_SIZE);
    let samples = data::generate_shapes(d.n_images as usize, &cfg, d.data_seed)?;
    data::dump_dataset(&a.out_dir, &samples)?;
    println!("wrote {} images to {}", samples.len(), a.out_dir.display());
    Ok(())
}
