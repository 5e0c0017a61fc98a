use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use featcomp::bench::{
    collect_curve, delta_accuracy, measure_encoding_latency, rac_report, ConfigMeasurement, Method, RateAccuracyCurve,
    DEFAULT_LATENCY_IMAGES, DEFAULT_WARMUP,
};
use featcomp::data::{make_batch, synth, Dataset, Normalization};
use featcomp::edge::{self, EdgeClient, Server};
use featcomp::entropy::bitstream::digest_hex;
use featcomp::entropy::CompressedFeature;
use featcomp::models::{classify_latent, compress, decompress, mac_breakdown, ArchConfig, ModelBundle, TeacherModel};
use featcomp::training::{self, evaluate, CsvLog, EpochLog, Setting, Strategy, TrainConfig};
use featcomp::{Error, Result, Tensor};

/// Learned feature compression for edge-cloud image classification.
#[derive(Parser, Debug)]
#[command(name = "featcomp", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in CIFAR-10 binary format.
    GenData(GenData),
    /// Train the teacher network with cross entropy.
    TrainTeacher(TrainTeacher),
    /// Train a student bundle against a teacher checkpoint.
    Train(Train),
    /// Measure bpp and top-1 accuracy of a checkpoint with real bitstreams.
    Eval(Eval),
    /// Compress one image into a feature file.
    Encode(Encode),
    /// Decode a feature file and print the predicted class.
    Decode(Decode),
    /// Serve a checkpoint over the edge-cloud protocol.
    Serve(Serve),
    /// Classify images through a running server.
    Classify(Classify),
    /// Measure the rate-accuracy-complexity report for several configurations.
    Bench(Bench),
    /// Delta-accuracy of one rate-accuracy curve against another.
    DeltaAcc(DeltaAcc),
    /// Print per-part multiply-accumulate counts.
    Flops(Flops),
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of training images.
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    /// Number of test images.
    #[arg(long, default_value_t = 2_000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding data_batch_*.bin and test_batch.bin.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Training files (repeatable); overrides the config.
    #[arg(long)]
    train_data: Vec<PathBuf>,
    /// Test files (repeatable); overrides the config.
    #[arg(long)]
    test_data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct Overrides {
    /// Training config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    test_limit: Option<usize>,
    /// Evaluate every N epochs (0: last epoch only).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct TrainTeacher {
    #[command(flatten)]
    common: Overrides,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    common: Overrides,
    /// Teacher checkpoint; overrides the config.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f32>,
    /// single_stage or two_stage.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// joint or cls_fixed.
    #[arg(long, value_parser = parse_setting)]
    setting: Option<Setting>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset files (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Evaluate the first N images only.
    #[arg(long)]
    limit: Option<usize>,
    /// Evaluate this single image only.
    #[arg(long, conflicts_with = "limit")]
    index: Option<usize>,
    /// Also print one JSON line per image.
    #[arg(long)]
    records: bool,
}

#[derive(Args, Debug)]
struct Encode {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file holding the image.
    #[arg(long)]
    image: PathBuf,
    /// Record index within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Decode {
    #[arg(long)]
    ckpt: PathBuf,
    /// Feature file written by `encode`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct Serve {
    /// HOST:PORT to listen on.
    #[arg(long)]
    addr: String,
    #[arg(long)]
    ckpt: PathBuf,
    /// Connection thread cap; defaults to EF_THREADS or the core count.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct Classify {
    /// Server HOST:PORT.
    #[arg(long)]
    addr: String,
    /// Local checkpoint used for encoding.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset file with the images to send.
    #[arg(long)]
    images: PathBuf,
    /// Number of images (default: all).
    #[arg(long)]
    count: Option<usize>,
    /// Compare every server prediction with the local pipeline.
    #[arg(long)]
    check_local: bool,
}

#[derive(Args, Debug)]
struct Bench {
    /// JSON: {"configs": [{"name", "checkpoints": [...]}], "warmup"?, "latency_images"?}.
    #[arg(long)]
    configs: PathBuf,
    /// Directory holding test_batch.bin.
    #[arg(long)]
    data: PathBuf,
    /// Name of the baseline configuration.
    #[arg(long)]
    baseline: String,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Also write the CSV report.
    #[arg(long)]
    out_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeltaAcc {
    /// Test curve CSV (bpp,top1).
    test: PathBuf,
    /// Baseline curve CSV (bpp,top1).
    baseline: PathBuf,
    /// cubic or linear; defaults to cubic when both curves have four points.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args, Debug)]
struct Flops {
    /// Student or teacher checkpoint.
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    ckpt: Option<PathBuf>,
    /// Architecture config JSON.
    #[arg(long)]
    arch: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("expected single_stage or two_stage, got {s:?}"))
}

fn parse_setting(s: &str) -> std::result::Result<Setting, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("expected joint or cls_fixed, got {s:?}"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Serve(a) => serve(a),
        Command::Classify(a) => classify(a),
        Command::Bench(a) => bench(a),
        Command::DeltaAcc(a) => delta_acc(a),
        Command::Flops(a) => flops(a),
    }
}

pub const TRAIN_FILE_RECORDS: usize = 10_000;

fn gen_data(a: GenData) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let train = synth::generate(a.train, a.seed);
    let test = synth::generate(a.test, a.seed ^ 0x5eed_7e57);
    let idx: Vec<usize> = (0..train.len()).collect();
    for (i, chunk) in idx.chunks(TRAIN_FILE_RECORDS).enumerate() {
        train.select(chunk).save(a.out.join(format!("data_batch_{}.bin", i + 1)))?;
    }
    test.save(a.out.join("test_batch.bin"))?;
    println!("{}", json!({ "train": train.len(), "test": test.len(), "dir": a.out }));
    Ok(())
}

fn data_dir_files(dir: &Path) -> Result<(Vec<PathBuf>, PathBuf)> {
    let mut train: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    train.sort();
    if train.is_empty() {
        return Err(Error::Format(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    Ok((train, dir.join("test_batch.bin")))
}

fn load_config(o: &Overrides) -> Result<TrainConfig> {
    let mut c = match &o.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::new(1.0, ArchConfig::default()),
    };
    if let Some(dir) = &o.data.data_dir {
        let (train, test) = data_dir_files(dir)?;
        c.train_data = train;
        c.test_data = vec![test];
    }
    if !o.data.train_data.is_empty() {
        c.train_data = o.data.train_data.clone();
    }
    if !o.data.test_data.is_empty() {
        c.test_data = o.data.test_data.clone();
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { c.$f = v; } )* };
    }
    set!(epochs, lr, batch_size, seed, eval_every);
    if o.train_limit.is_some() {
        c.train_limit = o.train_limit;
    }
    if o.test_limit.is_some() {
        c.test_limit = o.test_limit;
    }
    if c.min_lr > c.lr {
        c.min_lr = c.lr;
    }
    Ok(c)
}

fn load_sets(c: &TrainConfig) -> Result<(Dataset, Option<Dataset>)> {
    if c.train_data.is_empty() {
        return Err(Error::Config("no training data given (use --data-dir or --train-data)".into()));
    }
    let train = Dataset::load_all(&c.train_data)?;
    let test = if c.test_data.is_empty() { None } else { Some(Dataset::load_all(&c.test_data)?) };
    Ok((train, test))
}

/// Prints each epoch as a JSON line and appends it to the CSV log.
fn epoch_logger(path: &Option<PathBuf>) -> Result<impl FnMut(&EpochLog)> {
    let mut csv = path.as_ref().map(CsvLog::open).transpose()?;
    Ok(move |row: &EpochLog| {
        if let Some(c) = csv.as_mut() {
            if let Err(e) = c.write(row) {
                eprintln!("warning: could not write the epoch log: {e}");
            }
        }
        if let Ok(s) = serde_json::to_string(row) {
            println!("{s}");
        }
    })
}

fn train_teacher(a: TrainTeacher) -> Result<()> {
    let c = load_config(&a.common)?;
    let (train, test) = load_sets(&c)?;
    let mut log = epoch_logger(&a.common.log)?;
    let model = training::train_teacher(&c, &train, test.as_ref(), &mut log)?;
    model.save(&a.out)?;
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut c = load_config(&a.common)?;
    if let Some(l) = a.lambda {
        c.lambda = l;
    }
    if let Some(s) = a.strategy {
        c.strategy = s;
    }
    if let Some(s) = a.setting {
        c.setting = s;
    }
    if a.teacher.is_some() {
        c.teacher = a.teacher.clone();
    }
    let teacher_path = c
        .teacher
        .clone()
        .ok_or_else(|| Error::Config("no teacher checkpoint given (use --teacher)".into()))?;
    let teacher = TeacherModel::load(teacher_path)?;
    if teacher.config != c.arch {
        return Err(Error::Config("teacher architecture differs from the training config's arch".into()));
    }
    let (train, test) = load_sets(&c)?;
    let mut log = epoch_logger(&a.common.log)?;
    match training::train(&c, &teacher, &train, test.as_ref(), &mut log) {
        Ok(bundle) => bundle.save(&a.out),
        Err(f) => {
            if let Some(good) = f.last_good {
                let mut p = a.out.clone().into_os_string();
                p.push(".last_good");
                good.save(PathBuf::from(&p))?;
                eprintln!("note: last good weights written to {}", PathBuf::from(p).display());
            }
            Err(f.error)
        }
    }
}

fn eval(a: Eval) -> Result<()> {
    let bundle = ModelBundle::load(&a.ckpt)?;
    let mut data = Dataset::load_all(&a.data)?;
    if let Some(i) = a.index {
        if i >= data.len() {
            return Err(Error::Config(format!("index {i} out of range for {} images", data.len())));
        }
        data = data.select(&[i]);
    } else if let Some(n) = a.limit {
        data = data.take(n);
    }
    let norm = Normalization::default();
    let r = evaluate(&bundle, &data, &norm)?;
    if a.records {
        for rec in &r.records {
            println!("{}", serde_json::to_string(rec)?);
        }
    }
    let mut summary = json!({
        "images": r.records.len(),
        "bpp": r.bpp,
        "top1": r.top1,
        "clamped": r.clamped(),
    });
    if let Some(i) = a.index {
        summary["index"] = json!(i);
        summary["predicted"] = json!(r.records[0].predicted);
    }
    println!("{summary}");
    Ok(())
}

fn image_tensor(data: &Dataset, i: usize) -> Result<Tensor> {
    if i >= data.len() {
        return Err(Error::Config(format!("index {i} out of range for {} images", data.len())));
    }
    let b = make_batch(data, &[i], &Normalization::default(), None)?;
    let shape = b.images.shape()[1..].to_vec();
    Tensor::new(&shape, b.images.data().to_vec())
}

fn encode(a: Encode) -> Result<()> {
    let bundle = ModelBundle::load(&a.ckpt)?;
    let data = Dataset::load(&a.image)?;
    let cf = compress(&bundle, &image_tensor(&data, a.index)?)?;
    let bytes = cf.to_bytes();
    fs::write(&a.out, &bytes)?;
    println!("{}", json!({ "bytes": bytes.len(), "bpp": cf.bpp() }));
    Ok(())
}

fn decode(a: Decode) -> Result<()> {
    let bundle = ModelBundle::load(&a.ckpt)?;
    let cf = CompressedFeature::from_bytes(&fs::read(&a.input)?)?;
    let y = decompress(&bundle, &cf)?;
    let logits = classify_latent(&bundle, &y.unsqueeze0())?;
    let p = edge::Prediction::from_logits(logits.data(), 0);
    println!("{}", json!({ "predicted": p.class(), "top": p.top }));
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let bundle = ModelBundle::load(&a.ckpt)?;
    let server = Server::bind(a.addr.as_str(), bundle, a.threads.unwrap_or_else(edge::thread_cap))?;
    println!(
        "{}",
        json!({ "listening": server.local_addr()?.to_string(), "digest": digest_hex(&server.digest()) })
    );
    std::io::stdout().flush()?;
    server.run()
}

fn classify(a: Classify) -> Result<()> {
    let bundle = ModelBundle::load(&a.ckpt)?;
    let data = Dataset::load(&a.images)?;
    let n = a.count.unwrap_or(data.len()).min(data.len());
    let mut client = EdgeClient::connect(a.addr.as_str(), &bundle)?;
    let (mut correct, mut agree, mut enc, mut rtt) = (0usize, 0usize, 0u64, 0u64);
    for i in 0..n {
        let img = image_tensor(&data, i)?;
        let (p, t) = client.classify(&img)?;
        let mut line = json!({
            "index": i,
            "label": data.label(i),
            "predicted": p.class(),
            "encode_us": t.encode_us,
            "transfer_bytes": t.transfer_bytes,
            "rtt_us": t.rtt_us,
            "server_us": p.server_us,
        });
        if a.check_local {
            let y = decompress(&bundle, &compress(&bundle, &img)?)?;
            let local = classify_latent(&bundle, &y.unsqueeze0())?.argmax();
            agree += (local == p.class()) as usize;
            line["local"] = json!(local);
        }
        correct += (p.class() == data.label(i)) as usize;
        enc += t.encode_us;
        rtt += t.rtt_us;
        println!("{line}");
    }
    let d = n.max(1) as f64;
    let mut summary = json!({
        "count": n,
        "top1": correct as f64 / d,
        "mean_encode_us": enc as f64 / d,
        "mean_rtt_us": rtt as f64 / d,
    });
    if a.check_local {
        summary["agreement"] = json!(agree as f64 / d);
    }
    println!("{summary}");
    if a.check_local && agree != n {
        return Err(Error::Protocol(format!("{} of {n} server predictions differ from the local pipeline", n - agree)));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    configs: Vec<BenchEntry>,
    #[serde(default)]
    warmup: Option<usize>,
    #[serde(default)]
    latency_images: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchEntry {
    name: String,
    checkpoints: Vec<PathBuf>,
}

fn bench(a: Bench) -> Result<()> {
    let text = fs::read_to_string(&a.configs)?;
    let spec: BenchFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("bench config: {e}")))?;
    let data = Dataset::load(a.data.join("test_batch.bin"))?;
    let norm = Normalization::default();
    let warmup = spec.warmup.unwrap_or(DEFAULT_WARMUP);
    let n = spec.latency_images.unwrap_or(DEFAULT_LATENCY_IMAGES.min(data.len()));
    let mut configs = Vec::new();
    for entry in &spec.configs {
        let bundles: Vec<ModelBundle> = entry.checkpoints.iter().map(ModelBundle::load).collect::<Result<_>>()?;
        let first = bundles
            .first()
            .ok_or_else(|| Error::Config(format!("configuration {:?} has no checkpoints", entry.name)))?;
        if bundles.iter().any(|b| b.config != first.config) {
            return Err(Error::Config(format!("checkpoints of {:?} differ in architecture", entry.name)));
        }
        let (curve, _) = collect_curve(&entry.name, &bundles, &data, &norm)?;
        let latency = measure_encoding_latency(first, &data, &norm, warmup, n)?;
        configs.push(ConfigMeasurement {
            name: entry.name.clone(),
            macs: first.macs()?.encoder,
            latency,
            curve,
        });
    }
    let report = rac_report(configs, &a.baseline)?;
    let js = report.to_json()?;
    match &a.out_json {
        Some(p) => fs::write(p, &js)?,
        None => println!("{js}"),
    }
    if let Some(p) = &a.out_csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn delta_acc(a: DeltaAcc) -> Result<()> {
    let read = |p: &PathBuf| -> Result<RateAccuracyCurve> {
        let label = p.file_stem().and_then(|s| s.to_str()).unwrap_or("curve").to_string();
        RateAccuracyCurve::from_csv(label, &fs::read_to_string(p)?)
    };
    let (t, b) = (read(&a.test)?, read(&a.baseline)?);
    let method = a.method.unwrap_or_else(|| Method::for_curves(&t, &b));
    println!("{:?}", delta_accuracy(&t, &b, method)?);
    Ok(())
}

fn flops(a: Flops) -> Result<()> {
    let arch: ArchConfig = match (&a.ckpt, &a.arch) {
        (Some(p), _) => {
            let ckpt = featcomp::nn::checkpoint::Checkpoint::load(p)?;
            serde_json::from_value(ckpt.header.arch.clone())
                .map_err(|e| Error::Format(format!("checkpoint arch config: {e}")))?
        }
        (None, Some(p)) => {
            serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Config(format!("arch config: {e}")))?
        }
        (None, None) => unreachable!("clap requires one of --ckpt and --arch"),
    };
    let m = mac_breakdown(&arch)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}
