use std::fs;
use std::path::Path;

use lbe_core::classifiers::ClassifierKind;
use lbe_core::ensemble::EnsembleMethod;
use lbe_core::imaging::{save_png16, GrayImage};
use lbe_core::labels::{write_label_csv, FindingState, LabelRecord, NUM_FINDINGS};
use lbe_core::pipeline::{ArchitectureConfig, DataSource, EmbeddingFile, Run, RunConfig, Split, TrainVaeOptions};
use lbe_core::{Error, ErrorCategory};

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 11;
    c.data.synthetic.pool = 60;
    c.data.synthetic.test = 40;
    c.data.synthetic.image_size = 16;
    c.data.synthetic.informative = Some(c.labels.eval_classes.clone());
    c.preprocess.resize = 18;
    c.preprocess.crop = 16;
    c.preprocess.channels = 1;
    c.preprocess.template_samples = 20;
    c.vae.latent_dims = vec![4];
    c.vae.epochs = 4;
    c.vae.batch_size = 8;
    c.vae.decoder_widths = vec![32];
    c.vae.upsample_blocks = 1;
    c.vae.architectures = ["a", "b"]
        .iter()
        .map(|n| ArchitectureConfig {
            name: n.to_string(),
            encoder_widths: vec![16],
            ..Default::default()
        })
        .collect();
    c.classifiers.rf.n_estimators = Some(8);
    c.classifiers.xrt.n_estimators = Some(8);
    c.classifiers.gb.n_estimators = Some(10);
    c.classifiers.knn_k = 3;
    c
}

#[test]
fn full_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut run = Run::open(dir.path(), Some(cfg.clone())).unwrap();

    let manifest = run.cmd_prepare().unwrap();
    assert_eq!(manifest.count(Split::Train), 54);
    assert_eq!(manifest.count(Split::Validation), 6);
    assert_eq!(manifest.count(Split::Test), 40);
    assert!(manifest.errors.is_empty());

    let trained = run.cmd_train_vae(&TrainVaeOptions::default()).unwrap();
    assert_eq!(trained.len(), 2);
    assert!(trained.iter().all(|t| t.complete && t.epochs_run == 4));
    // finished checkpoints are not retrained
    assert!(run.cmd_train_vae(&TrainVaeOptions::default()).unwrap().iter().all(|t| t.epochs_run == 0));

    let files = run.cmd_extract(&[Split::Validation]).unwrap();
    assert_eq!(files.len(), 2);
    let emb = EmbeddingFile::load(&files[0]).unwrap();
    assert_eq!((emb.features.len(), emb.dim, emb.class_names.len()), (6, 4, 5));
    let val_ids: Vec<String> = manifest.split_items(Split::Validation).iter().map(|i| i.id.clone()).collect();
    assert_eq!(emb.row_ids, val_ids);

    match run.cmd_extract(&[Split::Test]) {
        Err(e @ Error::AccessViolation { .. }) => assert_eq!(e.category(), ErrorCategory::Data),
        other => panic!("test split must be refused, got {other:?}"),
    }
    assert!(!run.path("embeddings/a-d4.test.lbe").exists());

    let scores = run.cmd_train_clf().unwrap();
    assert_eq!(scores.len(), 8);

    let eval = run.cmd_evaluate().unwrap();
    assert_eq!(eval.models.len(), 8);
    assert_eq!(eval.ensembles.len(), 8);
    let e = eval.ensemble(4, ClassifierKind::Xrt, EnsembleMethod::SimpleAvg).unwrap();
    assert_eq!(e.members, vec!["a-d4", "b-d4"]);
    let rows = fs::read_to_string(run.path("reports/ensembles/d4__xrt__simple-avg.csv")).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("a-d4-xrt,") && lines[2].starts_with("b-d4-xrt,") && lines[3].starts_with("simple-avg-xrt,"));

    let report = run.cmd_report().unwrap();
    assert_eq!(report.rows.len(), report.model_rows + report.ensemble_rows);
    assert_eq!((report.model_rows, report.ensemble_rows), (8, 8));
    assert!(report.missing.is_empty(), "{:?}", report.missing);
    assert_eq!(report.reconstruction_columns, 3);
    let png = image::open(run.path("reports/reconstructions.png")).unwrap();
    assert_eq!(png.width() as usize, 3 * 16 + 2 * 2);
    let summary = fs::read_to_string(run.path("reports/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 17);
    for line in summary.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let values: Vec<f64> = cells[2..7].iter().filter(|c| !c.is_empty()).map(|c| c.parse().unwrap()).collect();
        let mean: f64 = cells[7].parse().unwrap();
        assert!((values.iter().sum::<f64>() / values.len() as f64 - mean).abs() <= 5e-5 + 1e-12);
    }
    assert!(fs::read_to_string(run.path("reports/summary.md")).unwrap().contains("## Latent size 4"));

    // tampering breaks the digest chain
    let emb_path = run.path("embeddings/b-d4.test.lbe");
    let mut bytes = fs::read(&emb_path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&emb_path, bytes).unwrap();
    assert!(matches!(run.cmd_report(), Err(Error::Data(m)) if m.contains("b-d4.test.lbe")));
}

#[test]
fn interrupted_training_resumes_bitwise() {
    let cfg = RunConfig {
        vae: lbe_core::pipeline::VaeConfig {
            architectures: vec![ArchitectureConfig {
                name: "only".into(),
                encoder_widths: vec![16],
                ..Default::default()
            }],
            ..tiny_config().vae
        },
        ..tiny_config()
    };
    let straight = tempfile::tempdir().unwrap();
    let mut run = Run::open(straight.path(), Some(cfg.clone())).unwrap();
    run.cmd_prepare().unwrap();
    run.cmd_train_vae(&TrainVaeOptions::default()).unwrap();

    let broken = tempfile::tempdir().unwrap();
    let mut run2 = Run::open(broken.path(), Some(cfg.clone())).unwrap();
    run2.cmd_prepare().unwrap();
    let stop = TrainVaeOptions { stop_after_epoch: Some(2) };
    let partial = run2.cmd_train_vae(&stop).unwrap();
    assert_eq!((partial[0].epochs_run, partial[0].complete), (2, false));
    assert!(run2.path("vae/only-d4.partial.ckpt").exists());
    assert!(!run2.path("vae/only-d4.ckpt").exists());
    drop(run2);

    let mut run2 = Run::open(broken.path(), None).unwrap();
    let resumed = run2.cmd_train_vae(&TrainVaeOptions::default()).unwrap();
    assert_eq!((resumed[0].epochs_run, resumed[0].complete), (2, true));
    assert!(!run2.path("vae/only-d4.partial.ckpt").exists());
    assert_eq!(
        fs::read(run.path("vae/only-d4.ckpt")).unwrap(),
        fs::read(run2.path("vae/only-d4.ckpt")).unwrap()
    );
}

#[test]
fn split_counts_and_manifest_determinism() {
    let mut cfg = tiny_config();
    cfg.data.synthetic.pool = 1000;
    cfg.data.synthetic.test = 5;
    cfg.data.synthetic.image_size = 8;
    cfg.preprocess.resize = 8;
    cfg.preprocess.crop = 8;
    cfg.vae.upsample_blocks = 0;
    let mut manifests = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::open(dir.path(), Some(cfg.clone())).unwrap();
        let m = run.cmd_prepare().unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Validation)), (900, 100));
        manifests.push(fs::read(run.path("manifest.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);
}

fn write_directory_dataset(root: &Path, n: usize, missing: usize) {
    fs::create_dir_all(root).unwrap();
    let mut records = Vec::new();
    for i in 0..n {
        let path = format!("patient{:03}/view{}.png", i / 2, i % 2);
        if i >= missing {
            fs::create_dir_all(root.join(format!("patient{:03}", i / 2))).unwrap();
            let px = (0..64).map(|p| ((p * (i + 3)) % 17) as f64 / 16.0).collect();
            save_png16(&GrayImage::new(8, 8, px).unwrap(), &root.join(&path)).unwrap();
        }
        let mut f = [FindingState::Negative; NUM_FINDINGS];
        f[2] = if i % 3 == 0 { FindingState::Uncertain } else { FindingState::Positive };
        f[5] = if i % 2 == 0 { FindingState::Positive } else { FindingState::Unmentioned };
        records.push(LabelRecord::new(path, f));
    }
    write_label_csv(&root.join("labels.csv"), &records).unwrap();
}

fn directory_config(base: &Path) -> RunConfig {
    let mut cfg = tiny_config();
    cfg.data.source = DataSource::Directory;
    cfg.data.root = Some(base.join("train"));
    cfg.data.test_root = Some(base.join("test"));
    cfg.preprocess.resize = 8;
    cfg.preprocess.crop = 8;
    cfg.vae.upsample_blocks = 0;
    cfg
}

#[test]
fn directory_source_tolerates_up_to_one_percent_failures() {
    let data = tempfile::tempdir().unwrap();
    write_directory_dataset(&data.path().join("train"), 150, 1);
    write_directory_dataset(&data.path().join("test"), 50, 0);
    let mut cfg = directory_config(data.path());
    cfg.data.group_by_patient = true;
    let out = tempfile::tempdir().unwrap();
    let mut run = Run::open(out.path(), Some(cfg)).unwrap();
    let m = run.cmd_prepare().unwrap();
    assert_eq!(m.errors.len(), 1);
    assert_eq!(m.items.len(), 199);
    // both views of a patient land in the same split
    for item in &m.items {
        if let Some(other) = m.items.iter().find(|o| o.id != item.id && o.path.split('/').next() == item.path.split('/').next() && o.id[..4] == item.id[..4]) {
            assert_eq!(other.split, item.split, "{} vs {}", item.id, other.id);
        }
    }

    let data = tempfile::tempdir().unwrap();
    write_directory_dataset(&data.path().join("train"), 150, 3);
    write_directory_dataset(&data.path().join("test"), 50, 0);
    let out = tempfile::tempdir().unwrap();
    let mut run = Run::open(out.path(), Some(directory_config(data.path()))).unwrap();
    match run.cmd_prepare() {
        Err(Error::Data(m)) => assert!(m.contains("3 of 200") && m.contains("patient000/view0.png")),
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn config_files_parse_with_defaults() {
    let cfg = RunConfig::from_toml_str("seed = 5\n[vae]\nlatent_dims = [8]\n").unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.vae.latent_dims, vec![8]);
    assert_eq!((cfg.data.train_fraction, cfg.data.validation_fraction), (0.9, 0.1));
    assert_eq!((cfg.preprocess.resize, cfg.preprocess.crop), (256, 224));
    assert_eq!(cfg.vae.learning_rate, 7.5e-4);
    let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
    assert_eq!(back, cfg);

    for bad in [
        "[data]\ntrain_fraction = 0.8\n",
        "[labels]\npolicy = \"lsr\"\nlsr_alpha = 0.4\n",
        "[classifiers]\nkinds = []\n",
        "[vae]\nlatent_dims = [0]\n",
        "unknown_key = 1\n",
        "[data]\nsource = \"directory\"\n",
    ] {
        let err = RunConfig::from_toml_str(bad).unwrap_err();
        assert_eq!(err.category(), ErrorCategory::Config, "{bad:?}: {err}");
    }
    let mut depth = RunConfig::from_toml_str("[classifiers.rf]\nmax_depth = 0\n").unwrap();
    match depth.classifiers.hyper(ClassifierKind::Rf) {
        lbe_core::classifiers::ClassifierHyper::Forest(h) => assert_eq!(h.max_depth, None),
        _ => unreachable!(),
    }
    depth.classifiers.full_size = true;
    match depth.classifiers.hyper(ClassifierKind::Xrt) {
        lbe_core::classifiers::ClassifierHyper::Forest(h) => assert_eq!(h.n_estimators, 2000),
        _ => unreachable!(),
    }
}
