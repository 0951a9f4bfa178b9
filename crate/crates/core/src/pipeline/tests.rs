use super::*;
use crate::numcore::Activation;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.train_samples = 6;
    c.data.heldout_samples = 4;
    c.data.test_samples = 2;
    c.model.stem = 4;
    c.model.channels = [4, 6, 6, 8];
    c.model.temb = 8;
    c.base.epochs = 1;
    c.base.batch = 3;
    c.adapter.batch = 3;
    c.adapter.epochs = 4;
    c.adapter.pose_loss_last_epochs = 2;
    c.adapter.lr = 1e-3;
    c.adapter.lp_max_t = 1000;
    c.diffusion.ddim_steps = 2;
    c
}

#[test]
fn defaults_carry_the_published_settings() {
    let c = RunConfig::default();
    assert_eq!(c.model.k, 9);
    assert_eq!(c.adapter.alpha, 0.01);
    assert_eq!(c.diffusion.ddim_steps, 50);
    assert_eq!(c.adapter.lr, 1e-5);
    assert_eq!(c.adapter.epochs, 20);
    assert_eq!(c.adapter.batch, 6);
    assert_eq!(c.adapter.text_drop, 0.5);
    assert_eq!(c.adapter.pose_loss_last_epochs, 5);
    assert_eq!(c.model.pgi_levels, 4);
    assert_eq!(c.model.activation, Activation::Gelu);
}

#[test]
fn toml_round_trip_and_unknown_keys() {
    let c = tiny();
    assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    let parsed = RunConfig::from_toml("[adapter]\nalpha = 0.05\n").unwrap();
    assert_eq!(parsed.adapter.alpha, 0.05);
    assert_eq!(parsed.adapter.lr, 1e-5);
    assert!(RunConfig::from_toml("[adapter]\nalhpa = 0.05\n").is_err());
    assert!(RunConfig::from_toml("[nonsense]\nx = 1\n").is_err());
}

#[test]
fn overrides_resolve_bare_and_qualified_keys() {
    let mut c = RunConfig::default();
    c.set("alpha", "0.1").unwrap();
    c.set("k", "5").unwrap();
    c.set("lr", "1").unwrap();
    c.set("base.lr", "0.002").unwrap();
    c.set("activation", "relu").unwrap();
    c.set("seed", "7").unwrap();
    assert_eq!(c.adapter.alpha, 0.1);
    assert_eq!(c.model.k, 5);
    assert_eq!(c.adapter.lr, 1.0);
    assert_eq!(c.base.lr, 0.002);
    assert_eq!(c.model.activation, Activation::Relu);
    assert_eq!(c.run.seed, 7);
    assert!(c.set("bogus", "1").is_err());
    assert!(c.set("adapter.k", "1").is_err());
    let mut bad = c.clone();
    bad.set("pgi_levels", "5").unwrap();
    assert!(bad.validate().is_err());
    assert!(c.set("k", "abc").is_err());
    let mut diff = c.diff(&RunConfig::default());
    diff.sort();
    assert_eq!(
        diff,
        ["adapter.alpha", "adapter.lr", "base.lr", "model.activation", "model.k", "run.seed"]
    );
}

#[test]
fn no_pgi_preset_toggles_only_the_bypass() {
    let c = RunConfig::default();
    let v = Preset::NoPgi.variants();
    assert_eq!(v[0].apply(&c).unwrap().diff(&c), ["model.pgi_levels"]);
    assert!(v[1].apply(&c).unwrap().diff(&c).is_empty());
    assert_eq!(Preset::NoLp.variants()[0].apply(&c).unwrap().diff(&c), ["adapter.alpha"]);
    assert_eq!(Preset::parse("graph_stages").unwrap().variants().len(), 5);
    let names: Vec<String> = Preset::parse("alpha_sweep").unwrap().variants().into_iter().map(|v| v.name).collect();
    assert_eq!(names, ["alpha0", "alpha0.01", "alpha0.05", "alpha0.1"]);
    assert!(Preset::parse("everything").is_err());
}

fn base_store(c: &RunConfig) -> crate::numcore::ParamStore {
    let splits = Splits::generate(c).unwrap();
    train_base(c, &splits.train).unwrap().0
}

fn loss_net(c: &RunConfig) -> crate::numcore::ParamStore {
    let net = train::posenet(crate::perception::POSENET_PREFIX, c).unwrap();
    let mut s = crate::numcore::ParamStore::new();
    use rand::SeedableRng;
    net.init(&mut s, &mut rand_chacha::ChaCha8Rng::seed_from_u64(3), false).unwrap();
    s
}

#[test]
fn pose_term_is_logged_only_in_the_last_epochs() {
    let c = tiny();
    let splits = Splits::generate(&c).unwrap();
    let (_, log) = train_adapter(&c, &base_store(&c), &loss_net(&c), &splits.train).unwrap();
    let active: Vec<usize> = log.iter().filter(|e| e.lp_active).map(|e| e.epoch).collect();
    assert_eq!(active, [3, 4]);
    assert!(log.iter().all(|e| e.lp_active == e.loss_p.is_some()));
    let csv = render_log(&log);
    assert!(csv.starts_with("epoch,loss_d,loss_p,lp_active\n1,"));
    assert_eq!(csv.lines().filter(|l| l.ends_with(",1")).count(), 2);
}

#[test]
fn zero_learning_rate_keeps_initial_adapter() {
    let mut c = tiny();
    c.adapter.lr = 0.0;
    c.adapter.epochs = 2;
    let base = base_store(&c);
    let splits = Splits::generate(&c).unwrap();
    let (trained, _) = train_adapter(&c, &base, &loss_net(&c), &splits.train).unwrap();
    let init = init_adapter(&c, &base).unwrap();
    assert_eq!(trained.len(), init.len());
    for (name, p) in init.iter() {
        assert!(p.tensor.bit_eq(trained.get(name).unwrap()), "{name}");
    }
}

#[test]
fn training_is_reproducible() {
    let c = tiny();
    let splits = Splits::generate(&c).unwrap();
    let (a, la) = train_base(&c, &splits.train).unwrap();
    let (b, lb) = train_base(&c, &splits.train).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.checksum(), b.checksum());
    let net = loss_net(&c);
    let (x, lx) = train_adapter(&c, &a, &net, &splits.train).unwrap();
    let (y, ly) = train_adapter(&c, &a, &net, &splits.train).unwrap();
    assert_eq!(lx, ly);
    assert_eq!(x.checksum(), y.checksum());
}

#[test]
fn adapter_phase_names_its_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_phase(Phase::Adapter, &tiny(), &dir.path().join("run"), dir.path()).unwrap_err();
    match err {
        crate::Error::MissingArtifact(msg) => assert!(msg.contains("base.grpt"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn run_directory_is_locked_and_documented() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny();
    let run = RunDir::create(dir.path(), &c).unwrap();
    assert!(RunDir::create(dir.path(), &c).is_err());
    run.save_checkpoint("x", &base_store(&c)).unwrap();
    drop(run);
    assert!(!dir.path().join(run_dir::LOCK_FILE).exists());
    assert_eq!(run_dir::load_config(dir.path()).unwrap(), c);
    assert!(run_dir::read_hashes(dir.path()).unwrap().contains_key("x"));
    for f in [run_dir::SEED_FILE, run_dir::GIT_FILE] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn evaluation_refuses_the_loss_network() {
    let c = tiny();
    let base = base_store(&c);
    let net = loss_net(&c);
    let mut eval_store = crate::numcore::ParamStore::new();
    for (name, p) in net.iter() {
        let renamed = name.replacen("posenet/", "posenet_eval/", 1);
        eval_store.insert(renamed, p.tensor.clone(), false).unwrap();
    }
    let eval_net = crate::perception::PoseNet::new("posenet_eval", c.posenet_net()).unwrap();
    let splits = Splits::generate(&c).unwrap();
    let fp = weights_fingerprint(&net, "posenet");
    let d = denoiser(&c, false).unwrap();
    let r = eval_alignment(&c, &d, &base, &fp, &eval_net, &eval_store, &splits.test);
    assert!(matches!(r, Err(crate::Error::Contract(_))));
}

#[test]
fn registered_fragments_pass_gradcheck() {
    let cfg = crate::numcore::gradcheck::GradcheckConfig::default();
    for name in suite::FRAGMENTS {
        let r = suite::check_fragment(name, &cfg).unwrap();
        assert!(r.passed(), "{name}\n{}", r.render());
    }
    assert!(suite::check_fragment("nope", &cfg).is_err());
}
