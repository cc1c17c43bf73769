use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use spatfactor::cluster::{accuracy_ratio, assemble_weights, dispersed_iterations, kmeans, mean_weights, rand_index};
use spatfactor::covtemporal::TemporalKind;
use spatfactor::diagnostics::{fit_metrics, FitMetrics};
use spatfactor::gibbs::{run_chain, ModelSpec, PosteriorStore, Variant};
use spatfactor::predict::{predict_future, predict_locations};
use spatfactor::simulate::{grid, simulate as simulate_design, two_group_design, ClusterDesign, SimDesign};

use crate::config::{model_spec, Config, FIT_KEYS, SIM_KEYS};
use crate::io::{self, fmt, LoadedData, StoreShape};
use crate::CliError;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))
}

fn kv(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

/// Upper bound on concurrent chain threads.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("SPATFACTOR_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("SPATFACTOR_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut c = Config::load(config, SIM_KEYS)?;
    if let Some(s) = seed {
        c.set("sim.seed", s.to_string());
    }
    let side: usize = c.num("sim.side", 10)?;
    let t: usize = c.num("sim.T", 30)?;
    let o: usize = c.num("sim.O", 1)?;
    let sigma2: f64 = c.num("sim.sigma2", 1.0)?;
    let psi: f64 = c.num("sim.psi", 0.5)?;
    let seed: u64 = c.num("sim.seed", 1)?;
    let tk = c.get("sim.temporal").unwrap_or("exponential");
    let temporal_kind = TemporalKind::parse(tk).ok_or_else(|| CliError::Config(format!("unknown temporal structure '{tk}'")))?;
    let period: usize = c.num("sim.period", 1)?;
    let design = match c.get("sim.design").unwrap_or("groups") {
        "groups" => {
            let mut d = two_group_design(side, t, sigma2, psi, seed);
            if let Some(spec) = c.get("sim.atoms") {
                let atoms = spec
                    .split(';')
                    .map(|g| g.split(',').map(|v| v.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| CliError::Config(format!("sim.atoms: cannot parse '{spec}'")))?;
                d.k = atoms.first().map_or(0, Vec::len);
                d.clusters = ClusterDesign::Groups { atoms };
            }
            d.o = o;
            d.temporal_kind = temporal_kind;
            d.period = period;
            d
        }
        "psbp" => SimDesign {
            coords: grid(side),
            o,
            t,
            k: c.num("sim.k", 2)?,
            temporal_kind,
            psi,
            period,
            rho: c.num("sim.rho", 1.0)?,
            sigma2,
            clusters: ClusterDesign::Psbp { max_clusters: c.num("sim.max_clusters", 20)? },
            seed,
        },
        other => return Err(CliError::Config(format!("sim.design: unknown design '{other}'"))),
    };
    let (data, truth) = simulate_design(&design)?;
    create_out(out)?;
    let ids: Vec<String> = (1..=data.m()).map(|i| i.to_string()).collect();
    let ld = LoadedData {
        data,
        location_ids: ids.clone(),
        raw_times: vec![],
        rescale: None,
        covariates: vec![],
    };
    io::write_dataset(&out.join("data.csv"), &ld)?;
    let (m, n) = (ld.data.m(), ld.data.n());
    let rows = (0..design.k).flat_map(|j| {
        let ids = &ids;
        let truth = &truth;
        (0..n).map(move |r| {
            vec![
                ids[r % m].clone(),
                (r / m + 1).to_string(),
                (j + 1).to_string(),
                (truth.labels[j][r] + 1).to_string(),
                fmt(truth.loadings[(r, j)]),
            ]
        })
    });
    let header: Vec<String> = ["location_id", "type", "factor", "label", "loading"].map(String::from).to_vec();
    io::write_csv(&out.join("truth.csv"), Some("true cluster labels and loadings per location, type and factor"), &header, rows)?;
    if let Some(g) = &truth.groups {
        io::write_csv(
            &out.join("groups.csv"),
            Some("true group per location"),
            &["location_id".to_string(), "group".to_string()],
            g.iter().enumerate().map(|(i, v)| vec![ids[i].clone(), (v + 1).to_string()]),
        )?;
    }
    let mut man = vec![kv("software", format!("spatfactor {VERSION}")), kv("command", "simulate")];
    man.extend(c.entries.iter().map(|(k, v)| (format!("config.{k}"), v.clone())));
    man.push(kv("data_sha256", io::sha256_file(&out.join("data.csv"))?));
    io::write_kv(&out.join("manifest.txt"), &man)
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub chains: Option<usize>,
    pub variant: Option<String>,
    pub h: Option<usize>,
}

fn run_chains(spec: &ModelSpec, data: &spatfactor::data::Dataset, chains: usize) -> Result<Vec<(PosteriorStore, f64)>, CliError> {
    let workers = thread_cap()?.min(chains);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(PosteriorStore, f64), CliError>>>> = Mutex::new((0..chains).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let c = next.fetch_add(1, Ordering::SeqCst);
                if c >= chains {
                    break;
                }
                let start = Instant::now();
                let r = run_chain(spec, data, c as u32).map(|st| (st, start.elapsed().as_secs_f64() * 1e3)).map_err(CliError::from);
                results.lock().unwrap()[c] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every chain ran")).collect()
}

pub fn fit(config: &Path, out: &Path, ov: Overrides) -> Result<(), CliError> {
    let mut c = Config::load(config, FIT_KEYS)?;
    if let Some(s) = ov.seed {
        c.set("schedule.seed", s.to_string());
    }
    if let Some(n) = ov.chains {
        c.set("schedule.chains", n.to_string());
    }
    if let Some(v) = ov.variant {
        c.set("model.variant", v);
    }
    if let Some(h) = ov.h {
        c.set("model.h", h.to_string());
    }
    let data_path = c.data_path()?;
    let sort = c.get("data.sort").unwrap_or("file").to_string();
    let ld = io::read_dataset(&data_path, &sort)?;
    let spec = model_spec(&c, &ld.data)?;
    let chains: usize = c.num("schedule.chains", 1)?;
    if chains == 0 {
        return Err(CliError::Config("schedule.chains must be at least 1".into()));
    }

    let start = Instant::now();
    let stores = run_chains(&spec, &ld.data, chains)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;

    create_out(out)?;
    std::fs::copy(&data_path, out.join("data.csv"))?;
    let mut saved = c.clone();
    saved.set("data.path", "data.csv");
    std::fs::write(out.join("config.txt"), saved.echo())?;
    let p = ld.data.p();
    for (i, (st, _)) in stores.iter().enumerate() {
        io::write_store(&out.join(format!("chain{i}")), st, p)?;
    }

    let mut tim = vec![kv("wall_ms", fmt(wall))];
    for (i, (st, ms)) in stores.iter().enumerate() {
        tim.push(kv(format!("chain{i}.wall_ms"), fmt(*ms)));
        for (step, (nanos, count)) in &st.timings.steps {
            tim.push(kv(format!("chain{i}.{step}.total_ms"), fmt(*nanos as f64 / 1e6)));
            tim.push(kv(format!("chain{i}.{step}.calls"), count));
        }
    }
    io::write_kv(&out.join("timings.txt"), &tim)?;

    let d = &ld.data;
    let mut man = vec![
        kv("software", format!("spatfactor {VERSION}")),
        kv("command", "fit"),
        kv("variant", spec.variant.name()),
        kv("seed", spec.schedule.seed),
        kv("chains", chains),
        kv("m", d.m()),
        kv("o", d.o),
        kv("t", d.t()),
        kv("k", spec.k),
        kv("p", p),
        kv("kept", spec.n_kept()),
        kv("data_sha256", io::sha256_file(&out.join("data.csv"))?),
        kv("config_sha256", io::sha256_file(&out.join("config.txt"))?),
    ];
    match ld.rescale {
        Some((origin, step)) => {
            man.push(kv("time_rescale", "1..T"));
            man.push(kv("time_origin", fmt(origin)));
            man.push(kv("time_step", fmt(step)));
        }
        None => man.push(kv("time_rescale", "none")),
    }
    man.extend(saved.entries.iter().map(|(k, v)| (format!("config.{k}"), v.clone())));
    for (i, (st, _)) in stores.iter().enumerate() {
        man.extend(io::store_counters(i, st));
    }
    io::write_kv(&out.join("manifest.txt"), &man)
}

/// A fit directory loaded back into memory.
pub struct Fit {
    pub loaded: LoadedData,
    pub spec: ModelSpec,
    pub stores: Vec<PosteriorStore>,
}

pub fn load_fit(dir: &Path) -> Result<Fit, CliError> {
    let manifest = io::read_kv(&dir.join("manifest.txt"))?;
    let c = Config::load(&dir.join("config.txt"), FIT_KEYS)?;
    let sort = c.get("data.sort").unwrap_or("file").to_string();
    let loaded = io::read_dataset(&c.data_path()?, &sort)?;
    let spec = model_spec(&c, &loaded.data)?;
    let get = |k: &str| -> Result<usize, CliError> {
        manifest
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{}: manifest lacks '{k}'", dir.display())))
    };
    let shape = StoreShape {
        variant: Variant::parse(manifest.get("variant").map_or("", String::as_str))
            .ok_or_else(|| CliError::Data("manifest has an unknown variant".into()))?,
        m: get("m")?,
        o: get("o")?,
        t: get("t")?,
        k: get("k")?,
        p: get("p")?,
    };
    let d = &loaded.data;
    if (shape.m, shape.o, shape.t, shape.p) != (d.m(), d.o, d.t(), d.p()) {
        return Err(CliError::Data("manifest shape does not match the stored dataset".into()));
    }
    let stores = (0..get("chains")?)
        .map(|ch| io::read_store(&dir.join(format!("chain{ch}")), ch, shape, &manifest))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Fit { loaded, spec, stores })
}

/// Linear-interpolated sample quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

const PRED_HEADER: [&str; 6] = ["chain", "draw", "location_id", "type", "time", "value"];
const SUMMARY_HEADER: [&str; 8] = ["location_id", "type", "time", "mean", "sd", "q025", "q500", "q975"];

/// Long-format draws plus per-cell summaries. `draws[c][w]` is rows × q with
/// row = o·r + i.
fn write_predictions(out: &Path, draws: &[Vec<DMatrix<f64>>], ids: &[String], times: &[f64]) -> Result<(), CliError> {
    let r = ids.len();
    let cell = |row: usize, col: usize| vec![ids[row % r].clone(), (row / r + 1).to_string(), fmt(times[col])];
    let rows = draws.iter().enumerate().flat_map(|(c, ch)| {
        ch.iter().enumerate().flat_map(move |(w, y)| {
            (0..y.nrows()).flat_map(move |row| {
                (0..y.ncols()).map(move |col| {
                    let mut v = vec![c.to_string(), w.to_string()];
                    v.extend(cell(row, col));
                    v.push(fmt(y[(row, col)]));
                    v
                })
            })
        })
    });
    let header: Vec<String> = PRED_HEADER.map(String::from).to_vec();
    io::write_csv(&out.join("draws.csv"), Some("one row per chain, kept draw, location, type and time"), &header, rows)?;

    let all: Vec<&DMatrix<f64>> = draws.iter().flatten().collect();
    let (nr, nc) = (all[0].nrows(), all[0].ncols());
    let mut summary = Vec::with_capacity(nr * nc);
    for row in 0..nr {
        for col in 0..nc {
            let mut v: Vec<f64> = all.iter().map(|y| y[(row, col)]).collect();
            let w = v.len() as f64;
            let mean = v.iter().sum::<f64>() / w;
            let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w - 1.0)).sqrt() } else { 0.0 };
            v.sort_by(f64::total_cmp);
            let mut line = cell(row, col);
            line.extend([mean, sd, quantile(&v, 0.025), quantile(&v, 0.5), quantile(&v, 0.975)].map(fmt));
            summary.push(line);
        }
    }
    let header: Vec<String> = SUMMARY_HEADER.map(String::from).to_vec();
    io::write_csv(&out.join("summary.csv"), Some("posterior predictive summaries pooled over chains"), &header, summary)
}

fn chain_seed(seed: u64, c: usize) -> u64 {
    seed.wrapping_add((c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn predict_time(fit: &Path, out: &Path, horizon: usize, covariates: Option<&Path>, seed: u64) -> Result<(), CliError> {
    if horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let f = load_fit(fit)?;
    let ld = &f.loaded;
    let new_times = ld.future_times(horizon);
    let x_new = match covariates {
        Some(p) => {
            let steps: Vec<f64> = (1..=horizon).map(|s| s as f64).collect();
            Some(io::read_target_covariates(p, "step", &ld.location_ids, ld.data.o, &steps, &ld.covariates)?)
        }
        None => None,
    };
    let draws = f
        .stores
        .iter()
        .enumerate()
        .map(|(c, st)| predict_future(st, &f.spec, &ld.data, &new_times, x_new.as_deref(), chain_seed(seed, c)))
        .collect::<Result<Vec<_>, _>>()?;
    create_out(out)?;
    let raw: Vec<f64> = new_times.iter().map(|&t| ld.to_raw_time(t)).collect();
    write_predictions(out, &draws, &ld.location_ids, &raw)
}

pub fn predict_space(fit: &Path, out: &Path, locations: &Path, covariates: Option<&Path>, seed: u64) -> Result<(), CliError> {
    let f = load_fit(fit)?;
    let ld = &f.loaded;
    let (ids, coords) = io::read_locations(locations)?;
    let x_new = match covariates {
        Some(p) => Some(io::read_target_covariates(p, "time", &ids, ld.data.o, &ld.raw_times, &ld.covariates)?),
        None => None,
    };
    let draws = f
        .stores
        .iter()
        .enumerate()
        .map(|(c, st)| predict_locations(st, &f.spec, &ld.data, &coords, x_new.as_deref(), chain_seed(seed, c)))
        .collect::<Result<Vec<_>, _>>()?;
    create_out(out)?;
    write_predictions(out, &draws, &ids, &ld.raw_times)
}

pub struct ClusterOpts {
    pub k: usize,
    pub iters: Option<Vec<usize>>,
    pub n_iters: usize,
    pub mean: bool,
    pub obs_type: usize,
    pub chain: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

fn read_truth(path: &Path, ids: &[String]) -> Result<Vec<usize>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let g: usize = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("line {line}: cannot parse group")))?;
        map.insert(rec.get(0).unwrap_or("").to_string(), g);
    }
    ids.iter()
        .map(|id| map.get(id).copied().ok_or_else(|| CliError::Data(format!("truth lacks location '{id}'"))))
        .collect()
}

pub fn cluster(fit: &Path, out: &Path, o: &ClusterOpts, truth: Option<&Path>) -> Result<(), CliError> {
    let f = load_fit(fit)?;
    let st = f
        .stores
        .get(o.chain)
        .ok_or_else(|| CliError::Usage(format!("chain {} not in fit ({} chains)", o.chain, f.stores.len())))?;
    if o.obs_type == 0 {
        return Err(CliError::Usage("--type is 1-based".into()));
    }
    let iters = o.iters.clone().unwrap_or_else(|| dispersed_iterations(st.samples.len(), o.n_iters));
    let w = if o.mean {
        mean_weights(st, o.obs_type - 1, &iters)?
    } else {
        assemble_weights(st, o.obs_type - 1, &iters)?
    };
    let km = kmeans(&w.values, o.k, o.restarts, o.max_iters, o.seed)?;
    create_out(out)?;
    let ld = &f.loaded;
    let header: Vec<String> = ["location_id", "x", "y", "cluster"].map(String::from).to_vec();
    io::write_csv(
        &out.join("labels.csv"),
        Some("k-means cluster (1-based) per location"),
        &header,
        (0..ld.data.m()).map(|i| {
            vec![ld.location_ids[i].clone(), fmt(ld.data.coords[i][0]), fmt(ld.data.coords[i][1]), (km.labels[i] + 1).to_string()]
        }),
    )?;
    let mut rep = vec![
        kv("K", o.k),
        kv("chain", o.chain),
        kv("type", o.obs_type),
        kv("iterations", iters.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")),
        kv("mean_weights", o.mean),
        kv("columns", w.values.ncols()),
        kv("wcss", fmt(km.wcss)),
    ];
    if let Some(p) = truth {
        let t = read_truth(p, &ld.location_ids)?;
        rep.push(kv("rand_index", fmt(rand_index(&km.labels, &t))));
        rep.push(kv("accuracy_ratio", fmt(accuracy_ratio(&km.labels, &t))));
    }
    io::write_kv(&out.join("report.txt"), &rep)
}

pub fn diagnose(fit: &Path, out: &Path, iters: Option<Vec<usize>>, seed: u64) -> Result<(), CliError> {
    let f = load_fit(fit)?;
    let mut metrics = Vec::new();
    for (c, st) in f.stores.iter().enumerate() {
        let sel = iters.clone().unwrap_or_else(|| (0..st.samples.len()).collect());
        metrics.push(fit_metrics(st, &f.loaded.data, &sel, chain_seed(seed, c))?);
    }
    create_out(out)?;
    let mut block = Vec::new();
    for (c, m) in metrics.iter().enumerate() {
        for (name, v) in FitMetrics::NAMES.iter().zip(m.values()) {
            block.push(kv(format!("chain{c}.{name}"), fmt(v)));
        }
    }
    io::write_kv(&out.join("metrics.txt"), &block)?;
    let header: Vec<String> = std::iter::once("chain".to_string()).chain(FitMetrics::NAMES.iter().map(|s| s.to_string())).collect();
    io::write_csv(
        &out.join("metrics.csv"),
        Some("fit metrics per chain"),
        &header,
        metrics.iter().enumerate().map(|(c, m)| std::iter::once(c.to_string()).chain(m.values().map(fmt)).collect()),
    )?;
    let header: Vec<String> = ["chain", "iter", "deviance"].map(String::from).to_vec();
    io::write_csv(
        &out.join("deviance.csv"),
        Some("deviance trace per chain and kept iteration"),
        &header,
        f.stores.iter().enumerate().flat_map(|(c, st)| st.samples.iter().map(move |s| vec![c.to_string(), s.iter.to_string(), fmt(s.deviance)])),
    )
}
