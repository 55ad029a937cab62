use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use hierdl_core::crbm::{self, Cd1Config, CrbmGeometry, CrbmState};
use hierdl_core::dataio::{self, ArtifactKind, ModelInfo, Split};
use hierdl_core::gradcheck::{check_layers, check_network, GradcheckConfig, GradcheckReport};
use hierdl_core::hierarchy::{
    classify_flat, classify_hierarchical, evaluate, load_bundle, BundleManifest, Classifier, HierarchyBundle,
    RouteWidths, TestItem, TopK,
};
use hierdl_core::network::builtin;
use hierdl_core::synth;
use hierdl_core::taxonomy::{build_htree, parse_isa_map, parse_synset_list, partition_leaves, HierarchyTree, LeafPartition, SynsetId};
use hierdl_core::training::{copy_layers, train_from, warm_start, EpochLog, Init, LabeledImages, TrainRecipe};
use hierdl_core::{Error, ModelState, NetworkSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Cli, Command, SynthKind, Target, TrainArgs, Widths};

pub enum CliError {
    Core(Error),
    Usage(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Cycle(_)) => 3,
            CliError::Core(Error::NonFinite(_)) => 1,
            CliError::Core(_) | CliError::Usage(_) => 2,
            CliError::Verification(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Verification(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::TaxonomyBuild {
            isa,
            synsets,
            iterations,
            out,
        } => taxonomy_build(&isa, &synsets, iterations, &out),
        Command::TaxonomyPartition {
            tree,
            max_leaf,
            min_leaf,
            out,
        } => taxonomy_partition(&tree, max_leaf, min_leaf, &out),
        Command::Train { model, out, log } => train(&model, cli.seed, &out, log.as_deref()),
        Command::TrainHierarchy {
            model,
            partition,
            out_dir,
        } => train_hierarchy(&model, cli.seed, threads, &partition, &out_dir),
        Command::PretrainCrbm {
            data,
            channels,
            size,
            filters,
            kernel,
            pool_block,
            config,
            epochs,
            lr,
            out,
            log,
        } => {
            let mut cfg = match config {
                Some(p) => Cd1Config::from_toml(&dataio::read_text(&p)?)?,
                None => Cd1Config::default(),
            };
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let g = CrbmGeometry {
                filters,
                in_channels: channels,
                kernel_h: kernel,
                kernel_w: kernel,
                pool_block,
            };
            pretrain_crbm(&data, [channels, size, size], g, &cfg, &out, log.as_deref())
        }
        Command::Transfer {
            from,
            into,
            layers,
            layer,
            out,
        } => transfer(&from, &into, layers, layer, &out),
        Command::Classify { target, image, widths } => classify(&target, &image, widths),
        Command::Evaluate {
            bundle,
            data,
            train_fraction,
            widths,
            out,
        } => evaluate_cmd(&bundle, &data, train_fraction, cli.seed.unwrap_or(0), widths, threads, &out),
        Command::ExportFilters { model, layer, out } => export_filters(&model, layer, &out),
        Command::Gradcheck { spec, seeds } => gradcheck(&spec, cli.seed.unwrap_or(0), seeds),
        Command::Synth { kind, per_class, out } => synth_cmd(kind, per_class, cli.seed.unwrap_or(0), &out),
    }
}

// ---- taxonomy ----

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(std::io::BufReader::new(f))
}

fn taxonomy_build(isa: &Path, synsets: &Path, iterations: usize, out: &Path) -> Result<()> {
    let map = parse_isa_map(open(isa)?)?;
    map.check_acyclic()?;
    let list = parse_synset_list(open(synsets)?)?;
    let tree = build_htree(&list, &map, iterations)?;
    dataio::write_text(out, &tree.to_json())?;
    print_tree_summary(&tree);
    Ok(())
}

fn print_tree_summary(tree: &HierarchyTree) {
    let depths = tree.depths();
    let mut per_depth = BTreeMap::<usize, usize>::new();
    for d in depths.values() {
        *per_depth.entry(*d).or_default() += 1;
    }
    println!("nodes: {}", depths.len());
    println!("roots: {}", tree.roots().len());
    println!("max depth: {}", tree.max_depth());
    println!("members: {}", tree.member_count());
    for (d, n) in per_depth {
        println!("depth {d}: {n} nodes");
    }
}

fn taxonomy_partition(tree: &Path, max_leaf: usize, min_leaf: usize, out: &Path) -> Result<()> {
    let tree = HierarchyTree::from_json(&dataio::read_text(tree)?)?;
    let p = partition_leaves(&tree, max_leaf, min_leaf)?;
    dataio::write_text(out, &p.to_json())?;
    let mut hist = BTreeMap::<usize, usize>::new();
    for g in p.leaves() {
        *hist.entry(g.len()).or_default() += 1;
    }
    println!("groups: {}", p.group_count());
    println!("synsets: {}", p.synset_count());
    for (size, n) in hist {
        println!("size {size}: {n} groups");
    }
    for w in &p.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

// ---- training ----

fn resolve_spec(name: &str) -> Result<NetworkSpec> {
    if let Some(s) = builtin::named(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "spec {name:?} is neither a builtin ({}) nor an existing file",
            builtin::NAMES.join(", ")
        )));
    }
    Ok(NetworkSpec::from_toml(&dataio::read_text(path)?)?)
}

fn recipe_for(args: &TrainArgs, seed: Option<u64>) -> Result<TrainRecipe> {
    let mut r = match &args.recipe {
        Some(p) => TrainRecipe::from_toml(&dataio::read_text(p)?)?,
        None => TrainRecipe::leaf_scratch(),
    };
    r.epochs = args.epochs.unwrap_or(r.epochs);
    r.lr = args.lr.unwrap_or(r.lr);
    r.momentum = args.momentum.unwrap_or(r.momentum);
    r.batch_size = args.batch_size.unwrap_or(r.batch_size);
    r.dropout &= !args.no_dropout;
    r.stochastic &= !args.no_stochastic;
    r.seed = seed.unwrap_or(r.seed);
    match args.init.as_deref() {
        None => {}
        Some("scratch") => r.init = Init::Scratch,
        Some(p) => {
            r.init = Init::WarmStart {
                path: PathBuf::from(p),
                layers: args.init_layers,
            }
        }
    }
    r.validate()?;
    Ok(r)
}

fn initial_model(spec: &NetworkSpec, recipe: &TrainRecipe) -> Result<ModelState> {
    let spec = recipe.effective_spec(spec);
    Ok(match &recipe.init {
        Init::Scratch => ModelState::init(&spec, &mut ChaCha8Rng::seed_from_u64(recipe.seed))?,
        Init::WarmStart { path, layers } => warm_start(&spec, &dataio::load_model(path)?, *layers, recipe.seed)?.0,
    })
}

fn provenance(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Trains and saves one model, logging every epoch to `log` if given.
fn fit(
    model: ModelState,
    data: &LabeledImages,
    recipe: &TrainRecipe,
    out: &Path,
    log: Option<&Path>,
    info: ModelInfo,
) -> Result<Vec<EpochLog>> {
    if let Some(l) = log {
        dataio::write_text(l, "")?;
    }
    let mut log_err = None;
    let (model, epochs) = train_from(model, data, recipe, |e| {
        if let (Some(l), None) = (log, &log_err) {
            log_err = dataio::append_lines(l, &[e.to_line()]).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    dataio::save_model(out, &model, &info)?;
    Ok(epochs)
}

fn print_last(name: &str, log: &[EpochLog]) {
    if let Some(e) = log.last() {
        println!(
            "{name}: {} epochs, final loss {:.6}, train top-1 {:.4}, top-5 {:.4}",
            e.epoch, e.mean_loss, e.top1, e.top5
        );
    }
}

fn train(args: &TrainArgs, seed: Option<u64>, out: &Path, log: Option<&Path>) -> Result<()> {
    let recipe = recipe_for(args, seed)?;
    let spec = resolve_spec(&args.spec)?;
    let ds = dataio::load_dataset(&args.data, spec.input_shape, Split::Train, args.train_fraction, recipe.seed)?;
    let data = ds.load_all()?;
    let spec = spec.with_class_count(ds.class_count())?;
    let model = initial_model(&spec, &recipe)?;
    let info = ModelInfo {
        class_names: ds.class_names.clone(),
        provenance: provenance(&[
            ("command", "train".into()),
            ("spec", args.spec.clone()),
            ("recipe", recipe.to_toml()),
        ]),
    };
    let epochs = fit(model, &data, &recipe, out, log, info)?;
    print_last(&spec.name, &epochs);
    Ok(())
}

struct Job {
    name: String,
    spec: NetworkSpec,
    data: LabeledImages,
    recipe: TrainRecipe,
    class_names: Vec<String>,
    file: String,
}

fn train_hierarchy(args: &TrainArgs, seed: Option<u64>, threads: usize, partition: &Path, out_dir: &Path) -> Result<()> {
    let recipe = recipe_for(args, seed)?;
    let partition = LeafPartition::from_json(&dataio::read_text(partition)?)?;
    let spec = resolve_spec(&args.spec)?;
    let ds = dataio::load_dataset(&args.data, spec.input_shape, Split::Train, args.train_fraction, recipe.seed)?;
    let all = ds.load_all()?;

    // dataset class index -> (RID, LID)
    let mut labels = Vec::with_capacity(ds.class_count());
    for name in &ds.class_names {
        let pos = name
            .parse::<SynsetId>()
            .ok()
            .and_then(|s| Some((partition.rid_of(s)?, partition.lid_of(s)?)));
        if pos.is_none() {
            log::warn!("class directory {name} is not a synset of the partition; skipped");
        }
        labels.push(pos);
    }

    let root_recipe = TrainRecipe {
        init: Init::Scratch,
        ..recipe.clone()
    };
    let groups = partition.group_count();
    let mut jobs = vec![Job {
        name: "root".into(),
        spec: spec.with_class_count(groups)?,
        data: synth::select(&all, |l| labels[l].map(|(r, _)| r as usize - 1))?,
        recipe: root_recipe,
        class_names: (1..=groups).map(|r| format!("RID {r}")).collect(),
        file: "root".into(),
    }];
    for rid in 1..=groups as u32 {
        let group = partition.group(rid).expect("rid in range");
        let data = synth::select(&all, |l| labels[l].filter(|&(r, _)| r == rid).map(|(_, lid)| lid as usize - 1))?;
        if data.is_empty() {
            return Err(Error::Data(format!("no training images for any synset of RID {rid}")).into());
        }
        jobs.push(Job {
            name: format!("leaf {rid}"),
            spec: spec.with_class_count(group.len())?,
            data,
            recipe: TrainRecipe {
                seed: recipe.seed + rid as u64,
                ..recipe.clone()
            },
            class_names: group.iter().map(ToString::to_string).collect(),
            file: format!("leaf-{rid}"),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    // Worker w takes jobs w, w + threads, ...; each job owns its data and files.
    let workers = threads.clamp(1, jobs.len());
    let results: Vec<(usize, Result<Vec<EpochLog>>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                scope.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, job)| {
                            let run = || -> Result<Vec<EpochLog>> {
                                let model = initial_model(&job.spec, &job.recipe)?;
                                let info = ModelInfo {
                                    class_names: job.class_names.clone(),
                                    provenance: provenance(&[
                                        ("command", "train-hierarchy".into()),
                                        ("model", job.name.clone()),
                                        ("spec", args.spec.clone()),
                                        ("recipe", job.recipe.to_toml()),
                                    ]),
                                };
                                fit(
                                    model,
                                    &job.data,
                                    &job.recipe,
                                    &out_dir.join(format!("{}.hdlc", job.file)),
                                    Some(&out_dir.join(format!("{}.log", job.file))),
                                    info,
                                )
                            };
                            (i, run())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
    });
    let mut results: Vec<_> = results;
    results.sort_by_key(|r| r.0);
    for (i, r) in results {
        print_last(&jobs[i].name, &r?);
    }

    dataio::write_text(&out_dir.join("partition.json"), &partition.to_json())?;
    let manifest = BundleManifest {
        root: "root.hdlc".into(),
        partition: "partition.json".into(),
        leaves: (1..=groups).map(|r| (r.to_string(), PathBuf::from(format!("leaf-{r}.hdlc")))).collect(),
    };
    let manifest_path = out_dir.join("bundle.toml");
    dataio::write_text(&manifest_path, &manifest.to_toml())?;
    println!("bundle: {}", manifest_path.display());
    Ok(())
}

fn pretrain_crbm(
    data: &Path,
    geometry: [usize; 3],
    g: CrbmGeometry,
    cfg: &Cd1Config,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let ds = dataio::load_dataset(data, geometry, Split::Train, 1.0, cfg.seed)?;
    let images = ds.load_all()?.images;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let state = CrbmState::init(g, &mut rng)?;
    if let Some(l) = log {
        dataio::write_text(l, "")?;
    }
    let mut log_err = None;
    let (state, epochs) = crbm::train_crbm_from(state, &images, cfg, &mut rng, |e| {
        if let (Some(l), None) = (log, &log_err) {
            log_err = dataio::append_lines(l, &[e.to_line()]).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let info = ModelInfo {
        class_names: Vec::new(),
        provenance: provenance(&[("command", "pretrain-crbm".into()), ("config", cfg.to_toml())]),
    };
    dataio::save_crbm(out, &state, &info)?;
    if let (Some(first), Some(last)) = (epochs.first(), epochs.last()) {
        println!(
            "{} epochs, reconstruction MSE {:.6} -> {:.6}, lr {:.6}",
            last.epoch, first.recon_mse, last.recon_mse, last.lr
        );
    }
    Ok(())
}

fn transfer(
    from: &Path,
    into: &Path,
    layers: hierdl_core::training::LayerCount,
    layer: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (mut target, mut info) = dataio::load_model_with_info(into)?;
    let moved = match dataio::read_metadata(from)?.kind {
        ArtifactKind::Crbm => {
            let s = dataio::load_crbm(from)?;
            let idx = match layer {
                Some(i) => i,
                None => target
                    .spec
                    .layers
                    .iter()
                    .position(|l| matches!(l, hierdl_core::LayerSpec::Conv { .. }))
                    .ok_or_else(|| CliError::Usage("target model has no convolution layer".into()))?,
            };
            target = crbm::transfer_to_cnn(&s, &target, idx)?;
            vec![idx]
        }
        ArtifactKind::Cnn => {
            if layer.is_some() {
                return Err(CliError::Usage("--layer applies to CRBM sources; use --layers for CNN sources".into()));
            }
            copy_layers(&mut target, &dataio::load_model(from)?, layers)?
        }
    };
    info.provenance.insert("transferred_from".into(), from.display().to_string());
    info.provenance.insert(
        "transferred_layers".into(),
        moved.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    dataio::save_model(out, &target, &info)?;
    println!("transferred layers {moved:?}");
    Ok(())
}

// ---- inference ----

/// Converts each image to the model's own input geometry before predicting.
struct Fitted(ModelState);

impl Classifier for Fitted {
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    fn probabilities(&self, image: &Tensor) -> hierdl_core::Result<Vec<f64>> {
        let [c, h, w] = self.0.spec.input_shape;
        let img = dataio::resize(&dataio::to_channels(image, c)?, h, w)?;
        self.0.probabilities(&img)
    }
}

fn fitted_bundle(manifest: &Path) -> Result<HierarchyBundle<Fitted>> {
    let b = load_bundle(manifest)?;
    let leaves = b.leaves.into_iter().map(|(r, m)| (r, Fitted(m))).collect();
    Ok(HierarchyBundle::new(Fitted(b.root), leaves, b.partition)?)
}

fn widths(w: Widths) -> RouteWidths {
    RouteWidths {
        root_k: w.root_k,
        leaf_k: w.leaf_k,
        out_k: w.topk,
    }
}

fn print_ranked(top: &TopK, name: impl Fn(u32) -> String) {
    for (rank, &(label, conf)) in top.entries.iter().enumerate() {
        println!("{} {label} {} {conf:.6}", rank + 1, name(label));
    }
}

fn classify(target: &Target, image: &Path, w: Widths) -> Result<()> {
    let img = dataio::read_image(image)?;
    if let Some(b) = &target.bundle {
        let bundle = fitted_bundle(b)?;
        let top = classify_hierarchical(&bundle, &img, widths(w))?;
        print_ranked(&top, |gid| {
            bundle.partition.synset_of_gid(gid).map_or_else(|| "?".into(), |s| s.to_string())
        });
    } else {
        let path = target.model.as_ref().expect("clap requires --bundle or --model");
        let (model, info) = dataio::load_model_with_info(path)?;
        let top = classify_flat(&Fitted(model), &img, w.topk)?;
        // 1-based class numbers, as GIDs are
        let top = TopK {
            entries: top.entries.into_iter().map(|(l, c)| (l + 1, c)).collect(),
        };
        print_ranked(&top, |k| {
            info.class_names.get(k as usize - 1).cloned().unwrap_or_else(|| format!("class{k}"))
        });
    }
    Ok(())
}

fn evaluate_cmd(
    manifest: &Path,
    data: &Path,
    train_fraction: Option<f64>,
    seed: u64,
    w: Widths,
    threads: usize,
    out: &Path,
) -> Result<()> {
    let bundle = fitted_bundle(manifest)?;
    let geometry = bundle.root.0.spec.input_shape;
    let ds = match train_fraction {
        Some(f) => dataio::load_dataset(data, geometry, Split::Val, f, seed)?,
        None => dataio::load_dataset(data, geometry, Split::Train, 1.0, seed)?,
    };
    let mut skipped = Vec::new();
    let gids: Vec<Option<u32>> = ds
        .class_names
        .iter()
        .map(|name| {
            let gid = name.parse::<SynsetId>().ok().and_then(|s| bundle.partition.gid_of(s));
            if gid.is_none() {
                let msg = format!("class directory {name} is not a synset of the bundle; skipped");
                log::warn!("{msg}");
                skipped.push(msg);
            }
            gid
        })
        .collect();
    let mut items = Vec::new();
    for (i, &(class, _)) in ds.items.iter().enumerate() {
        if let Some(gid) = gids[class] {
            items.push(TestItem {
                gid,
                rid: None,
                image: ds.load_item(i)?,
            });
        }
    }
    let mut report = evaluate(&bundle, &items, widths(w), threads)?;
    report.warnings.extend(skipped);
    let text = if out.extension().is_some_and(|e| e == "json") {
        serde_json::to_string_pretty(&report).expect("report serializes")
    } else {
        report.to_text()
    };
    dataio::write_text(out, &text)?;
    println!("{}", report.summary_line());
    Ok(())
}

// ---- verification and inspection ----

fn export_filters(model: &Path, layer: usize, out: &Path) -> Result<()> {
    let raster = match dataio::read_metadata(model)?.kind {
        ArtifactKind::Crbm => crbm::filter_raster(&dataio::load_crbm(model)?.filters)?,
        ArtifactKind::Cnn => crbm::filter_raster(crbm::conv_filters(&dataio::load_model(model)?, layer)?)?,
    };
    dataio::write_raster(out, &raster)?;
    println!("{} x {} mosaic written to {}", raster.width, raster.height, out.display());
    Ok(())
}

fn report_line(what: &str, seed: u64, r: &GradcheckReport, tolerance: f64) -> Option<String> {
    let worst = r.worst()?;
    let status = if r.passes(tolerance) { "ok" } else { "FAIL" };
    println!(
        "{status} seed {seed} {what}: worst {} rel error {:.3e} (tolerance {tolerance:.0e})",
        worst.name, worst.max_rel_error
    );
    (!r.passes(tolerance)).then(|| format!("seed {seed} {what} {}: rel error {:.3e}", worst.name, worst.max_rel_error))
}

fn gradcheck(spec: &str, seed: u64, seeds: u64) -> Result<()> {
    let spec = resolve_spec(spec)?;
    let layer_cfg = GradcheckConfig::default();
    let net_cfg = GradcheckConfig {
        tolerance: 1e-3,
        ..layer_cfg
    };
    let mut worst: Option<(f64, String)> = None;
    for s in seed..seed + seeds.max(1) {
        let checks = [
            ("layers", check_layers(s, &layer_cfg)?, layer_cfg.tolerance),
            ("network", check_network(&spec, s, &net_cfg)?, net_cfg.tolerance),
        ];
        for (what, report, tol) in checks {
            if let Some(msg) = report_line(what, s, &report, tol) {
                let ratio = report.max_rel_error() / tol;
                if worst.as_ref().is_none_or(|w| ratio > w.0) {
                    worst = Some((ratio, msg));
                }
            }
        }
    }
    match worst {
        Some((_, msg)) => Err(CliError::Verification(format!("gradient check failed; worst offender {msg}"))),
        None => Ok(()),
    }
}

fn synth_cmd(kind: SynthKind, per_class: usize, seed: u64, out: &Path) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, names) = match kind {
        SynthKind::Shapes => {
            let names: Vec<String> = (0..16).map(|c| synth::shape_synset(c).to_string()).collect();
            dataio::write_text(&out.join("isa.txt"), &synth::shapes_isa_text())?;
            dataio::write_text(&out.join("synsets.txt"), &(names.join("\n") + "\n"))?;
            (synth::shapes(per_class, &mut rng), names)
        }
        SynthKind::Halves => (synth::two_halves(per_class * 2, 8, &mut rng), vec!["left".into(), "right".into()]),
        SynthKind::Bars => {
            let images = synth::bars_and_stripes(per_class, 8, &mut rng);
            (LabeledImages::new(images, vec![0; per_class])?, vec!["bars".into()])
        }
    };
    dataio::write_dataset(out, &names, &data)?;
    println!("{} images in {} classes written to {}", data.len(), names.len(), out.display());
    Ok(())
}
