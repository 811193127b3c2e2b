use std::fs;
use std::path::{Path, PathBuf};

use agt::artifact::{read_bundle, save_model, write_bundle, BundleManifest};
use agt::certifier::{
    certified_fractions, find_k_prime, smooth_bound_from_k_prime, train_bundle, CertificateBundle,
};
use agt::datasets::{self, Dataset};
use agt::mechanisms::{
    release_binary, release_smooth_cauchy, release_smooth_laplace, threshold, tighter_epsilon,
    PrivacySpec,
};
use agt::oracle::{candidate_pool, soundness_trial, TrialPlan};
use agt::{Mode, ModelShape, PerturbationModel};
use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

/// How a command that ran to completion ended.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Violation,
}

/// A validated config paired with its hash.
pub struct Run {
    pub config: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl Run {
    pub fn new(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(seed) = seed_override {
            config.override_seeds(seed);
        }
        let hash = config.hash();
        Ok(Self {
            config,
            hash,
            out: out.to_path_buf(),
        })
    }

    fn data(&self) -> Result<(Dataset, Dataset)> {
        Ok(datasets::load(&self.config.dataset)?)
    }

    fn shape(&self, train: &Dataset) -> ModelShape {
        ModelShape::new(
            train.n_features,
            self.config.model.hidden.clone(),
            train.n_classes().max(2),
        )
    }

    /// Reads a bundle and refuses it unless it was built from this config.
    fn bundle(&self, dir: &Path) -> Result<(CertificateBundle, BundleManifest)> {
        let (bundle, manifest) =
            read_bundle(dir).with_context(|| format!("reading bundle in {}", dir.display()))?;
        manifest.check_hash(&self.hash)?;
        Ok((bundle, manifest))
    }

    fn csv_writer(&self, name: &str) -> Result<csv::Writer<fs::File>> {
        fs::create_dir_all(&self.out)?;
        Ok(csv::Writer::from_path(self.out.join(name))?)
    }
}

pub fn train(ctx: &Run) -> Result<Outcome> {
    let (train, test) = ctx.data()?;
    let shape = ctx.shape(&train);
    let c = &ctx.config;
    let bundle = train_bundle(
        &train.examples,
        &shape,
        &c.train,
        c.certify.mode,
        &c.certify.kset,
        c.beta(),
    )?;
    write_bundle(&ctx.out, &bundle, &ctx.hash)?;
    save_model(bundle.nominal(), ctx.out.join("model.json"))?;
    log::info!("wrote bundle and model to {}", ctx.out.display());

    let nominal = bundle.nominal();
    let correct = test
        .examples
        .iter()
        .map(|e| nominal.predict(&e.x).map(|p| p == e.y))
        .collect::<agt::Result<Vec<_>>>()?;
    let acc = correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64;
    println!(
        "trained {} boxes ({} mode), test accuracy {acc:.4}",
        bundle.kset().len(),
        bundle.mode()
    );
    for (k, f) in certified_fractions(&bundle, &test.features())? {
        println!("  k = {k:>4}: {:.1}% of test points certified", 100.0 * f);
    }
    Ok(Outcome::Ok)
}

fn query_set(ctx: &Run, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(path) => {
            let label = match &ctx.config.dataset.source {
                datasets::DataSource::Csv { label_column, .. } => label_column.clone(),
                datasets::DataSource::Blobs => "label".into(),
            };
            Ok(datasets::load_csv(path, &label)?.dataset)
        }
        None => Ok(ctx.data()?.1),
    }
}

pub fn certify(
    ctx: &Run,
    bundle_dir: &Path,
    data: Option<&Path>,
    require: Option<Mode>,
) -> Result<Outcome> {
    let (bundle, _) = ctx.bundle(bundle_dir)?;
    if let Some(mode) = require {
        ensure!(
            bundle.mode() == mode,
            "this command needs a {mode} bundle, found a {} bundle",
            bundle.mode()
        );
    }
    let queries = query_set(ctx, data)?;
    if !queries.is_empty() && queries.n_features != bundle.shape().inputs {
        bail!(
            "test data has {} features but the bundle's model expects {}",
            queries.n_features,
            bundle.shape().inputs
        );
    }

    let mut rows = ctx.csv_writer("queries.csv")?;
    rows.write_record(["index", "label", "predicted", "k_prime", "smooth_bound"])?;
    for (i, e) in queries.examples.iter().enumerate() {
        let predicted = bundle.nominal().predict(&e.x)?;
        let k_prime = find_k_prime(&bundle, &e.x)?;
        rows.write_record([
            i.to_string(),
            e.y.to_string(),
            predicted.to_string(),
            k_prime.map_or(String::new(), |k| k.to_string()),
            smooth_bound_from_k_prime(k_prime, bundle.beta()).to_string(),
        ])?;
    }
    rows.flush()?;

    let mut summary = ctx.csv_writer("summary.csv")?;
    summary.write_record(["k", "certified_fraction"])?;
    for (k, f) in certified_fractions(&bundle, &queries.features())? {
        summary.write_record([k.to_string(), f.to_string()])?;
        println!(
            "k = {k:>4}: {:.1}% of {} queries certified",
            100.0 * f,
            queries.len()
        );
    }
    summary.flush()?;
    Ok(Outcome::Ok)
}

pub fn privacy_eval(ctx: &Run, bundle_dir: &Path, data: Option<&Path>) -> Result<Outcome> {
    let (bundle, _) = ctx.bundle(bundle_dir)?;
    ensure!(
        bundle.mode() == Mode::Privacy,
        "privacy-eval needs a privacy bundle, found {}",
        bundle.mode()
    );
    ensure!(
        bundle.shape().classes == 2,
        "noisy release is defined for binary classifiers only"
    );
    let queries = query_set(ctx, data)?;
    let p = &ctx.config.privacy;

    let nominal = bundle.nominal();
    let mut predicted = Vec::with_capacity(queries.len());
    let mut k_primes = Vec::with_capacity(queries.len());
    for e in &queries.examples {
        predicted.push(nominal.predict(&e.x)?);
        k_primes.push(find_k_prime(&bundle, &e.x)?);
    }
    let n = queries.len().max(1) as f64;
    let noiseless = queries
        .examples
        .iter()
        .zip(&predicted)
        .filter(|(e, &p)| p == e.y)
        .count() as f64
        / n;

    let mut accuracy = ctx.csv_writer("accuracy.csv")?;
    accuracy.write_record([
        "epsilon",
        "noiseless",
        "global_laplace",
        "smooth_cauchy",
        "smooth_laplace",
        "mean_eps_s",
    ])?;
    let mut accounting = ctx.csv_writer("accounting.csv")?;
    accounting.write_record([
        "query_index",
        "epsilon",
        "delta",
        "k_prime",
        "k_star",
        "s_bound",
        "eps_s",
    ])?;

    for (ei, &eps) in p.epsilons.iter().enumerate() {
        let cauchy = PrivacySpec::cauchy(eps)?;
        let laplace = PrivacySpec::laplace(eps, p.delta)?;
        let (mut global_hits, mut cauchy_hits, mut laplace_hits) = (0usize, 0usize, 0usize);
        let mut eps_s_sum = 0.0;
        for (q, (e, (&pred, &k_prime))) in queries
            .examples
            .iter()
            .zip(predicted.iter().zip(&k_primes))
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(ei as u64));
            rng.set_stream(q as u64);
            let score = pred as f64;
            let s_cauchy = smooth_bound_from_k_prime(k_prime, cauchy.beta);
            let s_laplace = smooth_bound_from_k_prime(k_prime, laplace.beta);
            for _ in 0..p.n_draws {
                global_hits += usize::from(release_binary(score, eps, &mut rng)? == e.y);
                cauchy_hits += usize::from(
                    threshold(release_smooth_cauchy(score, s_cauchy, &cauchy, &mut rng)?) == e.y,
                );
                laplace_hits += usize::from(
                    threshold(release_smooth_laplace(
                        score, s_laplace, &laplace, &mut rng,
                    )?) == e.y,
                );
            }
            let k_star = k_prime.map_or(1, |k| k + 1);
            let acct = tighter_epsilon(eps, p.delta, k_star)?;
            eps_s_sum += acct.eps_s;
            accounting.write_record([
                q.to_string(),
                eps.to_string(),
                p.delta.to_string(),
                k_prime.map_or(String::new(), |k| k.to_string()),
                k_star.to_string(),
                s_laplace.to_string(),
                acct.eps_s.to_string(),
            ])?;
        }
        let draws = (queries.len() * p.n_draws).max(1) as f64;
        let row = [
            eps,
            noiseless,
            global_hits as f64 / draws,
            cauchy_hits as f64 / draws,
            laplace_hits as f64 / draws,
            eps_s_sum / n,
        ];
        accuracy.write_record(row.iter().map(|v| v.to_string()))?;
        println!(
            "eps = {eps}: accuracy global {:.4}, smooth cauchy {:.4}, smooth laplace {:.4}; mean eps_s {:.4}",
            row[2], row[3], row[4], row[5]
        );
    }
    accuracy.flush()?;
    accounting.flush()?;
    Ok(Outcome::Ok)
}

pub fn oracle(ctx: &Run, bundle_dir: &Path, negative_control: bool) -> Result<Outcome> {
    let (bundle, _) = ctx.bundle(bundle_dir)?;
    let (train, test) = ctx.data()?;
    let shape = ctx.shape(&train);
    ensure!(
        shape == bundle.shape(),
        "bundle model shape does not match the config"
    );
    let o = &ctx.config.oracle;
    let max_abs = train
        .examples
        .iter()
        .flat_map(|e| e.x.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let pool = candidate_pool(
        &test.examples,
        train.n_features,
        shape.classes,
        o.pool_scale * max_abs.max(1.0),
    );
    let plan = TrialPlan {
        random: o.random_trials,
        adversarial: o.adversarial_trials,
        seed: o.seed,
    };

    let mut rows = ctx.csv_writer("trials.csv")?;
    rows.write_record([
        "k",
        "trial_seed",
        "kind",
        "removals",
        "additions",
        "violations",
        "max_excess",
    ])?;
    let mut total = 0;
    for (&k, pbox) in bundle.kset().iter().zip(bundle.boxes()) {
        let pm = PerturbationModel::for_mode(bundle.mode(), k);
        let checked = if negative_control {
            pbox.shrink_towards_nominal(0.5)
        } else {
            pbox.clone()
        };
        let started = std::time::Instant::now();
        let report = soundness_trial(
            &train.examples,
            &shape,
            &ctx.config.train,
            &pm,
            &checked,
            &plan,
            &pool,
        )?;
        log::info!(
            "k = {k}: {} retrainings in {:.1?}",
            report.rows.len(),
            started.elapsed()
        );
        for r in &report.rows {
            rows.write_record([
                k.to_string(),
                r.trial_seed.to_string(),
                r.kind.to_string(),
                r.removals.to_string(),
                r.additions.to_string(),
                r.violations.to_string(),
                r.max_excess.to_string(),
            ])?;
        }
        println!(
            "k = {k:>4}: {} trials, {} parameters outside the box (max excess {:.3e})",
            report.rows.len(),
            report.violations(),
            report.max_excess()
        );
        total += report.violations();
    }
    rows.flush()?;
    Ok(if total > 0 {
        Outcome::Violation
    } else {
        Outcome::Ok
    })
}
