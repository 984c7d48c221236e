//! Command-line surface: synth, extract, build, query, eval, sweep, inspect.
//!
//! Commands work on a store directory. `extract` writes the image list,
//! normalized histograms, a validated copy of the descriptors and
//! `manifest.toml`; `build` adds the codebook, HE parameters and index. The
//! manifest records the SHA-256 of every store file and a corpus fingerprint,
//! and every later command re-verifies both before reading anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{read_descriptors, write_descriptors, Codebook, LocalDescriptor};
use crate::embedding::HeParameters;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, format_jsonl, format_table, prepare_queries, sweep, GroundTruth, Protocol, SweepSpec,
};
use crate::fusion::{Engine, PipelineConfig};
use crate::holistic::{
    decode_ppm, hsv_histogram, normalize_histogram, read_histograms, read_image_list,
    write_histograms, write_image_list, HsvHistogram,
};
use crate::index::InvertedIndex;
use crate::synthgen::{generate, reference_spec, SynthSpec};
use crate::ImageId;

pub const CONFIG_VERSION: u32 = 1;

pub const MANIFEST: &str = "manifest.toml";
pub const IMAGE_LIST: &str = "images.txt";
pub const HISTOGRAMS: &str = "histograms.c2fh";
pub const DESCRIPTORS: &str = "descriptors.c2fd";
pub const CODEBOOK: &str = "codebook.c2fc";
pub const HE_PARAMS: &str = "he.c2fe";
pub const INDEX: &str = "index.c2fi";

const EXTRACT_FILES: [&str; 3] = [IMAGE_LIST, HISTOGRAMS, DESCRIPTORS];
const BUILD_FILES: [&str; 3] = [CODEBOOK, HE_PARAMS, INDEX];

/// Versioned configuration file: `version = 1` plus a `[pipeline]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    let file: ConfigFile =
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()).at(path))?;
    if file.version != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "unsupported config version {} (expected {CONFIG_VERSION})",
            file.version
        ))
        .at(path));
    }
    file.pipeline.validate().map_err(|e| e.at(path))?;
    Ok(file.pipeline)
}

/// Store manifest. `fingerprint` hashes the configuration together with the
/// extracted files; `built_from` is the fingerprint the build files were
/// produced under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub built_from: Option<String>,
    pub config: PipelineConfig,
    pub files: BTreeMap<String, String>,
}

impl CorpusManifest {
    fn compute_fingerprint(config: &PipelineConfig, files: &BTreeMap<String, String>) -> Result<String> {
        let mut h = Sha256::new();
        h.update(b"c2f corpus v1\n");
        h.update(toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?);
        for name in EXTRACT_FILES {
            let digest = files
                .get(name)
                .ok_or_else(|| Error::Config(format!("manifest does not list {name}")))?;
            h.update(name.as_bytes());
            h.update(b"=");
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn load(store: &Path) -> Result<Self> {
        let path = store.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::from(e).at(&path))?;
        let m: CorpusManifest =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()).at(&path))?;
        if m.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)).at(&path));
        }
        Ok(m)
    }

    fn save(&self, store: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&store.join(MANIFEST), text.as_bytes())
    }

    /// Checks the fingerprint and the hash of every listed file.
    pub fn verify(&self, store: &Path) -> Result<()> {
        for (name, expected) in &self.files {
            let path = store.join(name);
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(Error::Fingerprint {
                    path,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        let actual = Self::compute_fingerprint(&self.config, &self.files)?;
        if actual != self.fingerprint {
            return Err(Error::Fingerprint {
                path: store.join(MANIFEST),
                expected: self.fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    fn require_build(&self, store: &Path) -> Result<()> {
        match &self.built_from {
            Some(f) if f == &self.fingerprint => Ok(()),
            Some(f) => Err(Error::Fingerprint {
                path: store.join(INDEX),
                expected: self.fingerprint.clone(),
                actual: f.clone(),
            }),
            None => Err(Error::Config("store has not been built; run `c2f build` first".into())
                .at(store)),
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from(e).at(path))
}

/// Writes `bytes` to `store/name` and returns its digest.
fn put(store: &Path, name: &str, bytes: &[u8]) -> Result<String> {
    write_file(&store.join(name), bytes)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Resolves the input images: a directory (every `*.ppm`, sorted by name) or
/// a list file whose lines are paths relative to the list's directory.
/// Returns (name recorded in the store, path on disk).
fn image_inputs(images: &Path) -> Result<Vec<(String, PathBuf)>> {
    if images.is_dir() {
        let mut names = Vec::new();
        for entry in fs::read_dir(images).map_err(|e| Error::from(e).at(images))? {
            let entry = entry.map_err(|e| Error::from(e).at(images))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".ppm") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names.into_iter().map(|n| (n.clone(), images.join(n))).collect())
    } else {
        let text = fs::read_to_string(images).map_err(|e| Error::from(e).at(images))?;
        let base = images.parent().unwrap_or(Path::new("."));
        Ok(read_image_list(&text)
            .into_iter()
            .map(|n| (n.clone(), base.join(n)))
            .collect())
    }
}

/// Ingests images and descriptors into a fresh store.
pub fn cmd_extract(
    images: &Path,
    descriptors: &Path,
    store: &Path,
    config: &PipelineConfig,
    err: &mut dyn Write,
) -> Result<CorpusManifest> {
    config.validate()?;
    let inputs = image_inputs(images)?;
    if inputs.is_empty() {
        return Err(Error::EmptyDatabase.at(images));
    }
    let mut hists = Vec::with_capacity(inputs.len());
    let mut failures = 0usize;
    for (_, path) in &inputs {
        let hist = read_file(path).and_then(|bytes| {
            let img = decode_ppm(&bytes)?;
            normalize_histogram(&hsv_histogram(&img, config.hsv_dims), config.alpha)
        });
        match hist {
            Ok(h) => hists.push(h),
            Err(e) => {
                failures += 1;
                let e = match e {
                    Error::Path { .. } => e,
                    other => other.at(path),
                };
                writeln!(err, "error: {e}")?;
            }
        }
    }
    if failures > 0 {
        return Err(Error::format(
            "extract",
            format!("{failures} of {} images could not be read", inputs.len()),
        ));
    }

    let (dim, descs) = read_descriptors(&read_file(descriptors)?[..]).map_err(|e| e.at(descriptors))?;
    validate_descriptors(&descs, inputs.len()).map_err(|e| e.at(descriptors))?;

    fs::create_dir_all(store).map_err(|e| Error::from(e).at(store))?;
    let mut files = BTreeMap::new();
    let names: Vec<String> = inputs.into_iter().map(|(n, _)| n).collect();
    let mut buf = Vec::new();
    write_image_list(&mut buf, &names)?;
    files.insert(IMAGE_LIST.to_string(), put(store, IMAGE_LIST, &buf)?);
    buf.clear();
    write_histograms(&mut buf, &hists)?;
    files.insert(HISTOGRAMS.to_string(), put(store, HISTOGRAMS, &buf)?);
    buf.clear();
    write_descriptors(&mut buf, dim, &descs)?;
    files.insert(DESCRIPTORS.to_string(), put(store, DESCRIPTORS, &buf)?);
    for stale in BUILD_FILES {
        let _ = fs::remove_file(store.join(stale));
    }

    let manifest = CorpusManifest {
        version: CONFIG_VERSION,
        fingerprint: CorpusManifest::compute_fingerprint(config, &files)?,
        built_from: None,
        config: config.clone(),
        files,
    };
    manifest.save(store)?;
    Ok(manifest)
}

fn validate_descriptors(descs: &[LocalDescriptor], n_images: usize) -> Result<()> {
    for (i, d) in descs.iter().enumerate() {
        if d.image_id as usize >= n_images {
            return Err(Error::format(
                "descriptors",
                format!("record {i} refers to image {} but only {n_images} images were given", d.image_id),
            ));
        }
        if let Some(p) = d.values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::format("descriptors", format!("record {i}: {}", Error::InvalidDescriptor(p))));
        }
    }
    Ok(())
}

/// Trains the codebook and HE parameters and indexes the store's
/// descriptors. `config` replaces the stored configuration when given; it may
/// not change the histogram settings the store was extracted with.
pub fn cmd_build(store: &Path, config: Option<&PipelineConfig>) -> Result<CorpusManifest> {
    let mut manifest = CorpusManifest::load(store)?;
    manifest.verify(store)?;
    if let Some(cfg) = config {
        cfg.validate()?;
        if cfg.hsv_dims != manifest.config.hsv_dims || cfg.alpha != manifest.config.alpha {
            return Err(Error::ConfigMismatch(
                "histogram bins and alpha are fixed at extract time; re-run extract to change them".into(),
            ));
        }
        manifest.config = cfg.clone();
    }
    let cfg = manifest.config.clone();
    let histograms = load_histograms(store, &cfg)?;
    let descriptors = load_descriptors(store)?;
    let engine = Engine::build(histograms, &descriptors, &cfg)?;

    let mut buf = Vec::new();
    engine.codebook().write_to(&mut buf)?;
    let cb = put(store, CODEBOOK, &buf)?;
    buf.clear();
    engine.he().write_to(&mut buf)?;
    let he = put(store, HE_PARAMS, &buf)?;
    buf.clear();
    engine.index().write_to(&mut buf)?;
    let idx = put(store, INDEX, &buf)?;
    manifest.files.insert(CODEBOOK.to_string(), cb);
    manifest.files.insert(HE_PARAMS.to_string(), he);
    manifest.files.insert(INDEX.to_string(), idx);
    manifest.fingerprint = CorpusManifest::compute_fingerprint(&cfg, &manifest.files)?;
    manifest.built_from = Some(manifest.fingerprint.clone());
    manifest.save(store)?;
    Ok(manifest)
}

fn load_histograms(store: &Path, cfg: &PipelineConfig) -> Result<Vec<HsvHistogram>> {
    let path = store.join(HISTOGRAMS);
    read_histograms(&read_file(&path)?[..], cfg.hsv_dims).map_err(|e| e.at(&path))
}

fn load_descriptors(store: &Path) -> Result<Vec<LocalDescriptor>> {
    let path = store.join(DESCRIPTORS);
    read_descriptors(&read_file(&path)?[..])
        .map(|(_, d)| d)
        .map_err(|e| e.at(&path))
}

/// A verified, built store loaded into memory.
pub struct LoadedStore {
    pub manifest: CorpusManifest,
    pub engine: Engine,
    pub descriptors: Vec<LocalDescriptor>,
    pub image_names: Vec<String>,
}

pub fn open_store(store: &Path) -> Result<LoadedStore> {
    let manifest = CorpusManifest::load(store)?;
    manifest.verify(store)?;
    manifest.require_build(store)?;
    let cfg = &manifest.config;
    let read = |name: &str| read_file(&store.join(name));
    let codebook = Codebook::read_from(&read(CODEBOOK)?[..]).map_err(|e| e.at(store.join(CODEBOOK)))?;
    let he = HeParameters::read_from(&read(HE_PARAMS)?[..]).map_err(|e| e.at(store.join(HE_PARAMS)))?;
    let index = InvertedIndex::read_from(&read(INDEX)?[..]).map_err(|e| e.at(store.join(INDEX)))?;
    let engine = Engine::new(load_histograms(store, cfg)?, codebook, he, index)?;
    let image_names = read_image_list(&String::from_utf8_lossy(&read(IMAGE_LIST)?));
    Ok(LoadedStore {
        descriptors: load_descriptors(store)?,
        manifest,
        engine,
        image_names,
    })
}

/// Query-time overrides shared by query, eval and sweep.
#[derive(Args, Clone, Debug, Default, PartialEq)]
pub struct QueryFlags {
    /// Number of holistic candidates K.
    #[arg(long = "k")]
    pub candidates: Option<usize>,
    /// Use uniform weights 1/K.
    #[arg(long)]
    pub no_weights: bool,
    /// Skip dividing local scores by the image norm.
    #[arg(long)]
    pub no_norm: bool,
    /// Multiple-assignment width on the query side.
    #[arg(long)]
    pub ma: Option<usize>,
}

impl QueryFlags {
    pub fn apply(&self, base: &PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        if let Some(k) = self.candidates {
            cfg.candidates = k;
        }
        if self.no_weights {
            cfg.weights_enabled = false;
        }
        if self.no_norm {
            cfg.normalization_enabled = false;
        }
        if let Some(m) = self.ma {
            cfg.ma = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where a query comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum QuerySource {
    Database(ImageId),
    Files { image: PathBuf, descriptors: PathBuf },
}

/// Runs one query and writes its JSON record as a single line.
pub fn cmd_query(store: &LoadedStore, source: &QuerySource, flags: &QueryFlags, out: &mut dyn Write) -> Result<()> {
    let cfg = flags.apply(&store.manifest.config)?;
    let engine = &store.engine;
    let query = match source {
        QuerySource::Database(id) => {
            if *id as usize >= engine.n_images() {
                return Err(Error::UnknownQuery(*id));
            }
            let own: Vec<LocalDescriptor> =
                store.descriptors.iter().filter(|d| d.image_id == *id).cloned().collect();
            engine.prepare_database_image(*id, &own, &cfg)?
        }
        QuerySource::Files { image, descriptors } => {
            let img = decode_ppm(&read_file(image)?).map_err(|e| e.at(image))?;
            let raw = hsv_histogram(&img, cfg.hsv_dims);
            let (_, descs) = read_descriptors(&read_file(descriptors)?[..]).map_err(|e| e.at(descriptors))?;
            engine.prepare(None, &raw, &descs, &cfg)?
        }
    };
    let result = engine.run_query(&query, &cfg)?;
    writeln!(out, "{}", result.to_record())?;
    Ok(())
}

fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
    GroundTruth::parse(&text).map_err(|e| e.at(path))
}

/// Images that neither ask nor answer any ground-truth query.
fn distractor_count(gt: &GroundTruth, n_images: usize) -> usize {
    let mut involved = BTreeSet::new();
    for q in gt.queries() {
        involved.insert(q);
        if let Some(p) = gt.positives(q) {
            involved.extend(p.iter().copied());
        }
    }
    n_images.saturating_sub(involved.len())
}

/// Evaluates every ground-truth query. Writes a short report to `out` and,
/// when `records` is given, one JSON result line per query there.
pub fn cmd_eval(
    store: &LoadedStore,
    ground_truth: &Path,
    protocol: Protocol,
    flags: &QueryFlags,
    out: &mut dyn Write,
    records: Option<&mut dyn Write>,
) -> Result<()> {
    let cfg = flags.apply(&store.manifest.config)?;
    let gt = load_ground_truth(ground_truth)?;
    gt.validate(store.engine.n_images(), protocol).map_err(|e| e.at(ground_truth))?;
    let queries = prepare_queries(&store.engine, &store.descriptors, &gt, &cfg)?;
    let run = evaluate(&store.engine, &queries, &gt, protocol, &cfg)?;
    writeln!(out, "protocol     {protocol}")?;
    writeln!(out, "images       {}", store.engine.n_images())?;
    writeln!(out, "queries      {}", queries.len())?;
    writeln!(out, "candidates   {}", cfg.candidates.min(store.engine.n_images()))?;
    writeln!(out, "weights      {}", if cfg.weights_enabled { "on" } else { "off" })?;
    writeln!(out, "{:<12} {:.6}", run.metric.to_string(), run.value)?;
    writeln!(out, "comparisons  {:.1}", run.mean_comparisons)?;
    if let Some(rec) = records {
        for r in &run.results {
            writeln!(rec, "{}", r.to_record())?;
        }
    }
    Ok(())
}

/// Runs a K × weights sweep; the table goes to `out`, JSON lines to `jsonl`.
pub fn cmd_sweep(
    store: &LoadedStore,
    ground_truth: &Path,
    protocol: Protocol,
    flags: &QueryFlags,
    spec: &SweepSpec,
    out: &mut dyn Write,
    jsonl: Option<&mut dyn Write>,
) -> Result<()> {
    let cfg = flags.apply(&store.manifest.config)?;
    if spec.candidates.is_empty() || spec.weights.is_empty() {
        return Err(Error::Parameter("sweep needs at least one K and one weights setting".into()));
    }
    let gt = load_ground_truth(ground_truth)?;
    gt.validate(store.engine.n_images(), protocol).map_err(|e| e.at(ground_truth))?;
    let queries = prepare_queries(&store.engine, &store.descriptors, &gt, &cfg)?;
    let distractors = distractor_count(&gt, store.engine.n_images());
    let rows = sweep(&store.engine, &queries, &gt, protocol, &cfg, spec, distractors)?;
    out.write_all(format_table(&rows).as_bytes())?;
    if let Some(j) = jsonl {
        j.write_all(format_jsonl(&rows).as_bytes())?;
    }
    Ok(())
}

/// Prints the manifest and the index memory breakdown.
pub fn cmd_inspect(store: &Path, out: &mut dyn Write) -> Result<()> {
    let manifest = CorpusManifest::load(store)?;
    manifest.verify(store)?;
    writeln!(out, "fingerprint  {}", manifest.fingerprint)?;
    writeln!(
        out,
        "built        {}",
        if manifest.built_from.as_deref() == Some(manifest.fingerprint.as_str()) { "yes" } else { "no" }
    )?;
    for (name, digest) in &manifest.files {
        writeln!(out, "file         {name:<16} {digest}")?;
    }
    if manifest.built_from.is_some() {
        let loaded = open_store(store)?;
        let idx = loaded.engine.index();
        let m = idx.memory_report();
        writeln!(out, "images       {}", idx.n_images())?;
        writeln!(out, "words        {}", idx.config().k)?;
        writeln!(out, "postings     {}", idx.total_postings())?;
        writeln!(out, "featureless  {}", idx.featureless_images().len())?;
        writeln!(out, "bytes.header          {}", m.header_bytes)?;
        writeln!(out, "bytes.posting_counts  {}", m.posting_count_bytes)?;
        writeln!(out, "bytes.postings        {}", m.posting_bytes)?;
        writeln!(out, "bytes.norms           {}", m.norm_bytes)?;
        writeln!(out, "bytes.idf             {}", m.idf_bytes)?;
        writeln!(out, "bytes.total           {}", m.total_bytes)?;
    }
    Ok(())
}

/// Generates a synthetic corpus directory (`images/`, `images.txt`,
/// `descriptors.c2fd`, `ground_truth.txt`).
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<()> {
    let corpus = generate(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::from(e).at(out_dir))?;
    corpus.write_to_dir(out_dir, spec.descriptor_dim)
}

#[derive(Parser, Debug)]
#[command(name = "c2f", version, about = "Coarse-to-fine image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigFlags {
    /// Versioned TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigFlags {
    fn resolve(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => base,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn is_set(&self) -> bool {
        self.config.is_some() || self.seed.is_some()
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Use the reference fixture with this many distractors per planted image.
        #[arg(long, conflicts_with = "spec")]
        reference: Option<usize>,
        /// TOML file with generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        distractors: Option<usize>,
        #[arg(long, default_value = "holidays-like")]
        protocol: Protocol,
    },
    /// Compute histograms and ingest descriptors into a store.
    Extract {
        /// Directory of PPM images or a list file of relative paths.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Train the codebook and HE parameters and build the index.
    Build {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        config: ConfigFlags,
    },
    /// Run one query and print its JSON record.
    Query {
        #[arg(long)]
        store: PathBuf,
        /// Database image id to use as the query.
        #[arg(long, conflicts_with_all = ["image", "query_descriptors"])]
        id: Option<ImageId>,
        /// Query image (PPM); requires --query-descriptors.
        #[arg(long, requires = "query_descriptors")]
        image: Option<PathBuf>,
        #[arg(long = "query-descriptors", requires = "image")]
        query_descriptors: Option<PathBuf>,
        #[command(flatten)]
        flags: QueryFlags,
    },
    /// Evaluate all ground-truth queries.
    Eval {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value = "holidays-like")]
        protocol: Protocol,
        /// Write one JSON result line per query here.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        flags: QueryFlags,
    },
    /// Sweep candidate counts and weighting.
    Sweep {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value = "holidays-like")]
        protocol: Protocol,
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        /// Weight settings to run: on, off or both.
        #[arg(long, default_value = "both")]
        weights: String,
        /// Record mean query latency (non-deterministic).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        jsonl: Option<PathBuf>,
        #[command(flatten)]
        flags: QueryFlags,
    },
    /// Show the manifest and index memory usage.
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
}

fn weight_settings(s: &str) -> Result<Vec<bool>> {
    match s {
        "on" => Ok(vec![true]),
        "off" => Ok(vec![false]),
        "both" => Ok(vec![true, false]),
        other => Err(Error::Parameter(format!("--weights must be on, off or both, got {other:?}"))),
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::from(e).at(path))
}

/// Executes a parsed command line.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth { out: dir, reference, spec, seed, distractors, protocol } => {
            let mut s = match (reference, spec) {
                (Some(m), _) => reference_spec(m),
                (None, Some(p)) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::from(e).at(&p))?;
                    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()).at(&p))?
                }
                (None, None) => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(d) = distractors {
                s.n_distractors = d;
            }
            s.protocol = protocol;
            cmd_synth(&s, &dir)?;
            writeln!(out, "wrote {} images to {}", s.n_images(), dir.display())?;
        }
        Command::Extract { images, descriptors, store, config } => {
            let cfg = config.resolve(PipelineConfig::default())?;
            let m = cmd_extract(&images, &descriptors, &store, &cfg, err)?;
            writeln!(out, "fingerprint {}", m.fingerprint)?;
        }
        Command::Build { store, config } => {
            let cfg = if config.is_set() {
                Some(config.resolve(CorpusManifest::load(&store)?.config)?)
            } else {
                None
            };
            let m = cmd_build(&store, cfg.as_ref())?;
            writeln!(out, "fingerprint {}", m.fingerprint)?;
        }
        Command::Query { store, id, image, query_descriptors, flags } => {
            let source = match (id, image, query_descriptors) {
                (Some(id), _, _) => QuerySource::Database(id),
                (None, Some(image), Some(descriptors)) => QuerySource::Files { image, descriptors },
                _ => return Err(Error::Parameter("give --id or --image with --query-descriptors".into())),
            };
            let loaded = open_store(&store)?;
            cmd_query(&loaded, &source, &flags, out)?;
        }
        Command::Eval { store, ground_truth, protocol, records, flags } => {
            let loaded = open_store(&store)?;
            let mut file = records.as_deref().map(create).transpose()?;
            cmd_eval(&loaded, &ground_truth, protocol, &flags, out, file.as_mut().map(|f| f as &mut dyn Write))?;
        }
        Command::Sweep { store, ground_truth, protocol, ks, weights, timing, jsonl, flags } => {
            let spec = SweepSpec { candidates: ks, weights: weight_settings(&weights)?, timing };
            let loaded = open_store(&store)?;
            let mut file = jsonl.as_deref().map(create).transpose()?;
            cmd_sweep(&loaded, &ground_truth, protocol, &flags, &spec, out, file.as_mut().map(|f| f as &mut dyn Write))?;
        }
        Command::Inspect { store } => cmd_inspect(&store, out)?,
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}
