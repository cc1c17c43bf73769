//! Dataset CSV ingestion and chain persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use spatfactor::data::Dataset;
use spatfactor::gibbs::{Audit, FactorSample, Metropolis, PosteriorStore, Sample, StepTimings, Variant};

use crate::CliError;

pub const REQUIRED: [&str; 6] = ["location_id", "x", "y", "type", "time", "value"];

/// A dataset together with the labels needed to write results back out.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: Dataset,
    pub location_ids: Vec<String>,
    /// Time values as given in the file.
    pub raw_times: Vec<f64>,
    /// (origin, step) when an equispaced grid was rescaled to 1..=T.
    pub rescale: Option<(f64, f64)>,
    pub covariates: Vec<String>,
}

impl LoadedData {
    /// Model time back to the file's units.
    pub fn to_raw_time(&self, t: f64) -> f64 {
        match self.rescale {
            Some((origin, step)) => origin + (t - 1.0) * step,
            None => t,
        }
    }

    /// Model times for `horizon` steps past the last observation.
    pub fn future_times(&self, horizon: usize) -> Vec<f64> {
        let tp = &self.data.timepoints;
        let last = *tp.last().expect("nonempty grid");
        let step = if self.rescale.is_some() || tp.len() < 2 {
            1.0
        } else {
            (last - tp[0]) / (tp.len() - 1) as f64
        };
        (1..=horizon).map(|c| last + c as f64 * step).collect()
    }
}

fn data_err(line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("line {line}: {msg}"))
}

fn reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T, CliError> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|_| data_err(line, format!("cannot parse {name} '{raw}'")))
}

fn finite(v: f64, name: &str, line: u64) -> Result<f64, CliError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(data_err(line, format!("{name} is not finite")))
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn column_index(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<Vec<usize>, CliError> {
    names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| CliError::Data(format!("{}: missing column '{n}'", path.display())))
        })
        .collect()
}

struct Row {
    loc: usize,
    o: usize,
    time: f64,
    value: f64,
    covs: Vec<f64>,
    line: u64,
}

/// Location ordering applied before fitting.
pub fn sort_order(ids: &[String], coords: &[Vec<f64>], sort: &str) -> Result<Vec<usize>, CliError> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    let key = |i: usize, c: usize| coords[i][c];
    match sort {
        "file" => {}
        "id" => {
            let numeric: Option<Vec<f64>> = ids.iter().map(|s| s.parse().ok()).collect();
            match numeric {
                Some(v) => idx.sort_by(|&a, &b| v[a].total_cmp(&v[b])),
                None => idx.sort_by(|&a, &b| ids[a].cmp(&ids[b])),
            }
        }
        "x" => idx.sort_by(|&a, &b| key(a, 0).total_cmp(&key(b, 0))),
        "y" => idx.sort_by(|&a, &b| key(a, 1).total_cmp(&key(b, 1))),
        "xy" => idx.sort_by(|&a, &b| (key(a, 0) + key(a, 1)).total_cmp(&(key(b, 0) + key(b, 1)))),
        other => return Err(CliError::Config(format!("data.sort: unknown ordering '{other}'"))),
    }
    Ok(idx)
}

/// Read a long-format dataset; every (location, type, time) cell must occur
/// exactly once.
pub fn read_dataset(path: &Path, sort: &str) -> Result<LoadedData, CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
    let cols = column_index(&headers, &REQUIRED, path)?;
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|i| !cols.contains(i)).collect();
    let covariates: Vec<String> = cov_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut ids: Vec<String> = Vec::new();
    let mut coords: Vec<Vec<f64>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e)
        })?;
        let line = line_of(&rec);
        let id = rec.get(cols[0]).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(data_err(line, "empty location_id"));
        }
        let x = finite(field(&rec, cols[1], "x", line)?, "x", line)?;
        let y = finite(field(&rec, cols[2], "y", line)?, "y", line)?;
        let ty: usize = field(&rec, cols[3], "type", line)?;
        if ty == 0 {
            return Err(data_err(line, "type must be at least 1"));
        }
        let time = finite(field(&rec, cols[4], "time", line)?, "time", line)?;
        let value = finite(field(&rec, cols[5], "value", line)?, "value", line)?;
        let covs = cov_cols
            .iter()
            .map(|&c| field(&rec, c, &headers[c], line).and_then(|v| finite(v, &headers[c], line)))
            .collect::<Result<Vec<f64>, _>>()?;
        let loc = match by_id.get(&id) {
            Some(&l) => {
                if coords[l] != [x, y] {
                    return Err(data_err(line, format!("location '{id}' has inconsistent coordinates")));
                }
                l
            }
            None => {
                by_id.insert(id.clone(), ids.len());
                ids.push(id);
                coords.push(vec![x, y]);
                ids.len() - 1
            }
        };
        rows.push(Row { loc, o: ty - 1, time, value, covs, line });
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }

    let order = sort_order(&ids, &coords, sort)?;
    let mut pos = vec![0; ids.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let o = rows.iter().map(|r| r.o).max().unwrap() + 1;
    let mut times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let m = ids.len();
    let (t, p) = (times.len(), cov_cols.len());
    let n = m * o;
    let mut y = DMatrix::zeros(n, t);
    let mut x = vec![DMatrix::zeros(n, p); if p > 0 { t } else { 0 }];
    let mut seen = vec![0u64; n * t];
    for r in &rows {
        let c = times.binary_search_by(|v| v.total_cmp(&r.time)).unwrap();
        let row = r.o * m + pos[r.loc];
        if seen[row * t + c] != 0 {
            return Err(data_err(r.line, format!("duplicate cell (also on line {})", seen[row * t + c])));
        }
        seen[row * t + c] = r.line.max(1);
        y[(row, c)] = r.value;
        for (a, v) in r.covs.iter().enumerate() {
            x[c][(row, a)] = *v;
        }
    }
    if let Some(miss) = seen.iter().position(|&s| s == 0) {
        let (row, c) = (miss / t, miss % t);
        return Err(CliError::Data(format!(
            "{}: missing cell location '{}' type {} time {}",
            path.display(),
            ids[order[row % m]],
            row / m + 1,
            times[c]
        )));
    }

    let step = if t > 1 { times[1] - times[0] } else { 1.0 };
    let equi = t == 1 || times.windows(2).all(|w| ((w[1] - w[0]) - step).abs() <= 1e-9 * step.abs().max(1.0));
    let (model_times, rescale) = if equi {
        ((1..=t).map(|v| v as f64).collect(), Some((times[0], step)))
    } else {
        (times.clone(), None)
    };
    let ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
    let coords: Vec<Vec<f64>> = order.iter().map(|&i| coords[i].clone()).collect();
    let data = Dataset::new(coords, o, model_times, y, x).map_err(CliError::from)?;
    Ok(LoadedData { data, location_ids: ids, raw_times: times, rescale, covariates })
}

/// New locations: `location_id,x,y`.
pub fn read_locations(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    let cols = column_index(&headers, &["location_id", "x", "y"], path)?;
    let (mut ids, mut coords) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(e.position().map_or(0, |p| p.line()), e))?;
        let line = line_of(&rec);
        ids.push(rec.get(cols[0]).unwrap_or("").to_string());
        let x = finite(field(&rec, cols[1], "x", line)?, "x", line)?;
        let y = finite(field(&rec, cols[2], "y", line)?, "y", line)?;
        coords.push(vec![x, y]);
    }
    if ids.is_empty() {
        return Err(CliError::Data(format!("{}: no locations", path.display())));
    }
    Ok((ids, coords))
}

/// Covariates for prediction targets: `location_id,type,<time_col>` and
/// then the covariate columns, in the fitted dataset's order. Returns one
/// (rows × p) block per target time; row = o·r + i.
pub fn read_target_covariates(
    path: &Path,
    time_col: &str,
    ids: &[String],
    o: usize,
    times: &[f64],
    names: &[String],
) -> Result<Vec<DMatrix<f64>>, CliError> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    let key = column_index(&headers, &["location_id", "type", time_col], path)?;
    let names_ref: Vec<&str> = names.iter().map(String::as_str).collect();
    let cov = column_index(&headers, &names_ref, path)?;
    let r = ids.len();
    let (rows, q, p) = (r * o, times.len(), names.len());
    let mut x = vec![DMatrix::zeros(rows, p); q];
    let mut seen = vec![false; rows * q];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(e.position().map_or(0, |p| p.line()), e))?;
        let line = line_of(&rec);
        let id = rec.get(key[0]).unwrap_or("");
        let i = ids.iter().position(|v| v == id).ok_or_else(|| data_err(line, format!("unknown location '{id}'")))?;
        let ty: usize = field(&rec, key[1], "type", line)?;
        if ty == 0 || ty > o {
            return Err(data_err(line, format!("type {ty} out of range 1..={o}")));
        }
        let tv: f64 = field(&rec, key[2], time_col, line)?;
        let c = times
            .iter()
            .position(|&v| (v - tv).abs() <= 1e-9 * v.abs().max(1.0))
            .ok_or_else(|| data_err(line, format!("{time_col} {tv} is not a target time")))?;
        let row = (ty - 1) * r + i;
        if std::mem::replace(&mut seen[row * q + c], true) {
            return Err(data_err(line, "duplicate covariate row"));
        }
        for (a, &col) in cov.iter().enumerate() {
            x[c][(row, a)] = finite(field(&rec, col, &headers[col], line)?, &headers[col], line)?;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(CliError::Data(format!("{}: covariates missing for some targets", path.display())));
    }
    Ok(x)
}

/// Long-format dataset writer matching `read_dataset`.
pub fn write_dataset(path: &Path, ld: &LoadedData) -> Result<(), CliError> {
    let d = &ld.data;
    let mut header: Vec<String> = REQUIRED.iter().map(|s| s.to_string()).collect();
    header.extend(ld.covariates.iter().cloned());
    let mut rows = Vec::with_capacity(d.n() * d.t());
    for i in 0..d.m() {
        for o in 0..d.o {
            for c in 0..d.t() {
                let r = d.row(i, o);
                let mut row = vec![
                    ld.location_ids[i].clone(),
                    fmt(d.coords[i][0]),
                    fmt(d.coords[i][1]),
                    (o + 1).to_string(),
                    fmt(ld.to_raw_time(d.timepoints[c])),
                    fmt(d.y[(r, c)]),
                ];
                if !d.x.is_empty() {
                    row.extend(d.x[c].row(r).iter().map(|v| fmt(*v)));
                }
                rows.push(row);
            }
        }
    }
    write_csv(path, None, &header, rows)
}

/// Shortest representation that parses back to the same f64.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv(path: &Path, comment: Option<&str>, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    if let Some(c) = comment {
        writeln!(f, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new().flexible(false).from_writer(f);
    w.write_record(header).map_err(csv_io)?;
    for r in rows {
        w.write_record(&r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> CliError {
    CliError::Other(e.to_string())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `key = value` lines, used for manifests and metric blocks.
pub fn write_kv(path: &Path, entries: &[(String, String)]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        for (k, v) in entries {
            writeln!(f, "{k} = {v}")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn iter_header(names: impl IntoIterator<Item = String>) -> Vec<String> {
    std::iter::once("iter".to_string()).chain(names).collect()
}

fn matrix_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|a| (0..cols).map(move |b| format!("{prefix}_{a}_{b}"))).collect()
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = String> + '_ {
    (0..m.nrows()).flat_map(move |a| (0..m.ncols()).map(move |b| fmt(m[(a, b)])))
}

fn padded(mut v: Vec<String>, width: usize) -> Vec<String> {
    v.resize(width, String::new());
    v
}

/// Per-parameter CSVs for one chain. Every file starts with a comment line
/// giving the column order.
pub fn write_store(dir: &Path, store: &PosteriorStore, p: usize) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let (m, o, t, k) = (store.m, store.o, store.t, store.k);
    let n = m * o;
    let ss = &store.samples;
    let one = |name: &str, f: &dyn Fn(&Sample) -> f64| -> Result<(), CliError> {
        write_csv(
            &dir.join(format!("{name}.csv")),
            Some(&format!("{name}: one row per kept iteration")),
            &iter_header([name.to_string()]),
            ss.iter().map(|s| vec![s.iter.to_string(), fmt(f(s))]),
        )
    };
    one("psi", &|s| s.psi)?;
    one("rho", &|s| s.rho)?;
    one("deviance", &|s| s.deviance)?;

    let mat = |name: &str, rows: usize, cols: usize, what: &str, f: &dyn Fn(&Sample) -> &DMatrix<f64>| {
        write_csv(
            &dir.join(format!("{name}.csv")),
            Some(&format!("{name}: one row per kept iteration; column {name}_a_b is entry (a, b), {what}")),
            &iter_header(matrix_names(name, rows, cols)),
            ss.iter().map(|s| std::iter::once(s.iter.to_string()).chain(row_major(f(s))).collect()),
        )
    };
    mat("eta", t, k, "a = time, b = factor", &|s| &s.eta)?;
    mat("upsilon", k, k, "factor by factor", &|s| &s.upsilon)?;
    mat("kappa", o, o, "type by type", &|s| &s.kappa)?;
    mat("loadings", n, k, "a = o*m + i (location fastest), b = factor", &|s| &s.loadings)?;

    let vecf = |name: &str, len: usize, what: &str, f: &dyn Fn(&Sample) -> &[f64]| {
        write_csv(
            &dir.join(format!("{name}.csv")),
            Some(&format!("{name}: one row per kept iteration; {what}")),
            &iter_header((0..len).map(|a| format!("{name}_{a}"))),
            ss.iter().map(|s| std::iter::once(s.iter.to_string()).chain(f(s).iter().map(|v| fmt(*v))).collect()),
        )
    };
    vecf("beta", p, "one column per covariate", &|s| &s.beta)?;
    vecf("sigma2", n, "column a = o*m + i (location fastest)", &|s| &s.sigma2)?;
    vecf("delta", k, "one column per factor", &|s| &s.delta)?;

    if store.variant.clustering() {
        for j in 0..k {
            let lmax = ss.iter().map(|s| s.factors[j].l).max().unwrap_or(1);
            write_csv(
                &dir.join(format!("factor{j}_atoms.csv")),
                Some("atoms: one row per kept iteration; L then L atom values, padded with empty fields"),
                &iter_header(std::iter::once("L".to_string()).chain((0..lmax).map(|l| format!("atom_{l}")))),
                ss.iter().map(|s| {
                    let f = &s.factors[j];
                    let row = [s.iter.to_string(), f.l.to_string()].into_iter().chain(f.atoms.iter().map(|v| fmt(*v)));
                    padded(row.collect(), lmax + 2)
                }),
            )?;
            write_csv(
                &dir.join(format!("factor{j}_labels.csv")),
                Some("labels: one row per kept iteration; column a = o*m + i (location fastest), 0-based cluster index"),
                &iter_header((0..n).map(|a| format!("label_{a}"))),
                ss.iter().map(|s| std::iter::once(s.iter.to_string()).chain(s.factors[j].labels.iter().map(|v| v.to_string())).collect()),
            )?;
            let width = (lmax - 1) * n;
            write_csv(
                &dir.join(format!("factor{j}_alpha.csv")),
                Some("alpha: one row per kept iteration; L then fields alpha_q_a, q = stick 0..L-2, a = i*O + o (type fastest), padded with empty fields"),
                &iter_header(std::iter::once("L".to_string()).chain(matrix_names("alpha", lmax - 1, n))),
                ss.iter().map(|s| {
                    let f = &s.factors[j];
                    let vals = f.alpha.iter().flat_map(|a| a.iter().map(|v| fmt(*v)));
                    padded([s.iter.to_string(), f.l.to_string()].into_iter().chain(vals).collect(), width + 2)
                }),
            )?;
        }
        write_csv(
            &dir.join("ltrace.csv"),
            Some("L trace: one row per sweep including burn-in; one column per factor"),
            &std::iter::once("sweep".to_string()).chain((0..k).map(|j| format!("L_{j}"))).collect::<Vec<_>>(),
            store.audit.l_trace.iter().enumerate().map(|(s, ls)| std::iter::once(s.to_string()).chain(ls.iter().map(|l| l.to_string())).collect()),
        )?;
        write_csv(
            &dir.join("audit.csv"),
            Some("audit: one row per sweep including burn-in; rows violating the slice constraint, summed over factors"),
            &["sweep".to_string(), "slice_violations".to_string()],
            store.audit.slice_violations.iter().enumerate().map(|(s, v)| vec![s.to_string(), v.to_string()]),
        )?;
    }
    Ok(())
}

/// Manifest entries for one chain's counters.
pub fn store_counters(c: usize, store: &PosteriorStore) -> Vec<(String, String)> {
    let mh = |name: &str, mh: &Metropolis| {
        vec![
            (format!("chain{c}.{name}.proposal_var"), fmt(mh.delta)),
            (format!("chain{c}.{name}.accepted"), mh.accepted.to_string()),
            (format!("chain{c}.{name}.tried"), mh.tried.to_string()),
        ]
    };
    let mut v = mh("psi", &store.mh_psi);
    v.extend(mh("rho", &store.mh_rho));
    v.push((format!("chain{c}.alpha_fallbacks"), store.audit.alpha_fallbacks.to_string()));
    v.push((format!("chain{c}.kept"), store.samples.len().to_string()));
    v
}

struct Table {
    rows: Vec<csv::StringRecord>,
    path: String,
}

impl Table {
    fn read(path: &Path) -> Result<Table, CliError> {
        let mut rdr = reader(path)?;
        let rows = rdr
            .records()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Table { rows, path: path.display().to_string() })
    }

    fn get<T: std::str::FromStr>(&self, r: usize, c: usize) -> Result<T, CliError> {
        let raw = self.rows.get(r).and_then(|x| x.get(c)).unwrap_or("");
        raw.parse().map_err(|_| CliError::Data(format!("{}: row {r} column {c}: cannot parse '{raw}'", self.path)))
    }

    fn floats(&self, r: usize, from: usize, len: usize) -> Result<Vec<f64>, CliError> {
        (from..from + len).map(|c| self.get(r, c)).collect()
    }

    fn expect_rows(&self, n: usize) -> Result<(), CliError> {
        if self.rows.len() != n {
            return Err(CliError::Data(format!("{}: {} rows, expected {n}", self.path, self.rows.len())));
        }
        Ok(())
    }
}

/// Shape of a stored chain, taken from the manifest.
#[derive(Debug, Clone, Copy)]
pub struct StoreShape {
    pub variant: Variant,
    pub m: usize,
    pub o: usize,
    pub t: usize,
    pub k: usize,
    pub p: usize,
}

/// Rebuild a chain from its CSVs. Step timings are not persisted here.
pub fn read_store(dir: &Path, c: usize, sh: StoreShape, manifest: &BTreeMap<String, String>) -> Result<PosteriorStore, CliError> {
    let StoreShape { variant, m, o, t, k, p } = sh;
    let n = m * o;
    let tab = |name: &str| Table::read(&dir.join(format!("{name}.csv")));
    let psi = tab("psi")?;
    let kept = psi.rows.len();
    let rho = tab("rho")?;
    let dev = tab("deviance")?;
    let eta = tab("eta")?;
    let ups = tab("upsilon")?;
    let kap = tab("kappa")?;
    let lam = tab("loadings")?;
    let beta = tab("beta")?;
    let s2 = tab("sigma2")?;
    let del = tab("delta")?;
    for tb in [&rho, &dev, &eta, &ups, &kap, &lam, &beta, &s2, &del] {
        tb.expect_rows(kept)?;
    }
    let fac: Vec<(Table, Table, Table)> = if variant.clustering() {
        (0..k)
            .map(|j| -> Result<_, CliError> {
                let a = tab(&format!("factor{j}_atoms"))?;
                let l = tab(&format!("factor{j}_labels"))?;
                let al = tab(&format!("factor{j}_alpha"))?;
                for tb in [&a, &l, &al] {
                    tb.expect_rows(kept)?;
                }
                Ok((a, l, al))
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![]
    };
    let mut samples = Vec::with_capacity(kept);
    for r in 0..kept {
        let factors = fac
            .iter()
            .map(|(a, lb, al)| -> Result<FactorSample, CliError> {
                let l: usize = a.get(r, 1)?;
                let atoms = a.floats(r, 2, l)?;
                let labels = (0..n).map(|c| lb.get(r, c + 1)).collect::<Result<Vec<usize>, _>>()?;
                let alpha = (0..l.saturating_sub(1)).map(|q| al.floats(r, 2 + q * n, n)).collect::<Result<Vec<_>, _>>()?;
                Ok(FactorSample { l, atoms, labels, alpha })
            })
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            iter: psi.get(r, 0)?,
            eta: DMatrix::from_row_slice(t, k, &eta.floats(r, 1, t * k)?),
            upsilon: DMatrix::from_row_slice(k, k, &ups.floats(r, 1, k * k)?),
            psi: psi.get(r, 1)?,
            rho: rho.get(r, 1)?,
            beta: beta.floats(r, 1, p)?,
            sigma2: s2.floats(r, 1, n)?,
            kappa: DMatrix::from_row_slice(o, o, &kap.floats(r, 1, o * o)?),
            delta: del.floats(r, 1, k)?,
            factors,
            loadings: DMatrix::from_row_slice(n, k, &lam.floats(r, 1, n * k)?),
            deviance: dev.get(r, 1)?,
        });
    }
    let mut audit = Audit::default();
    if variant.clustering() {
        let lt = tab("ltrace")?;
        audit.l_trace = (0..lt.rows.len())
            .map(|r| (0..k).map(|j| lt.get(r, j + 1)).collect::<Result<Vec<usize>, _>>())
            .collect::<Result<_, _>>()?;
        let au = tab("audit")?;
        audit.slice_violations = (0..au.rows.len()).map(|r| au.get(r, 1)).collect::<Result<_, _>>()?;
    }
    let num = |key: &str| -> Result<f64, CliError> {
        manifest
            .get(&format!("chain{c}.{key}"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("manifest lacks chain{c}.{key}")))
    };
    audit.alpha_fallbacks = num("alpha_fallbacks")? as usize;
    let mh = |name: &str| -> Result<Metropolis, CliError> {
        Ok(Metropolis::from_counts(
            num(&format!("{name}.proposal_var"))?,
            num(&format!("{name}.accepted"))? as usize,
            num(&format!("{name}.tried"))? as usize,
        ))
    };
    Ok(PosteriorStore {
        variant,
        chain: c as u32,
        m,
        o,
        t,
        k,
        samples,
        mh_psi: mh("psi")?,
        mh_rho: mh("rho")?,
        audit,
        timings: StepTimings::default(),
    })
}
