//! Checkpoint files.
//!
//! A UTF-8 header of `[section]` blocks followed by a line `[data]` and the
//! raw parameter bytes: every tensor listed under `[tensors]`, in order, as
//! little-endian f32. Floats in the header use Rust's shortest round-trip
//! formatting, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{format_timestamp, parse_timestamp, SiteIndex};
use crate::error::{Error, Result};
use crate::network::{build_model, ModelGraph, NetworkConfig, Standardizer, LOCATION_FEATURES};
use crate::training::{DataContext, EpochMetrics, OptimizerState, TrainState};

pub const FORMAT_LINE: &str = "tempmix-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub context: DataContext,
    /// Fold of every site seen when the run was set up.
    pub folds: BTreeMap<String, u8>,
    /// Present for checkpoints written during or after training.
    pub state: Option<TrainState>,
    /// Resolved run configuration, echoed verbatim.
    pub config_echo: Vec<(String, String)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\n', '\r', '\t']) || s.starts_with('[') {
        return Err(bad(format!("{kind} {s:?} cannot be stored")));
    }
    Ok(())
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (branch, g) in [("signal", &self.model.signal), ("outlier", &self.model.outlier)] {
            for p in g.params() {
                out.push((format!("{branch}/{}", p.name), &p.value));
            }
        }
        if let Some(st) = &self.state {
            let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
            for (n, t) in names.iter().zip(&st.optimizer.m) {
                out.push((format!("adam.m/{n}"), t));
            }
            for (n, t) in names.iter().zip(&st.optimizer.v) {
                out.push((format!("adam.v/{n}"), t));
            }
        }
        out
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let io = |e: std::io::Error| Error::io("checkpoint", e);
        let mut h = String::new();
        h.push_str(FORMAT_LINE);
        h.push('\n');

        h.push_str("[config]\n");
        for (k, v) in &self.config_echo {
            check_token("config key", k)?;
            if v.contains(['\n', '\r']) {
                return Err(bad(format!("config value for {k} spans lines")));
            }
            h.push_str(&format!("{k}={v}\n"));
        }

        let c = &self.model.config;
        h.push_str("[model]\n");
        h.push_str(&format!("conv_channels={}\n", join(&c.conv_channels)));
        h.push_str(&format!("dense_widths={}\n", join(&c.dense_widths)));
        h.push_str(&format!("outlier_hidden={}\n", c.outlier_hidden));
        h.push_str(&format!("dropout_rate={}\n", c.dropout_rate));
        h.push_str(&format!("kernel_size={}\n", c.kernel_size));
        h.push_str(&format!("patch_size={}\n", c.patch_size));
        h.push_str(&format!("patch_cell_m={}\n", c.patch_cell_m));
        h.push_str(&format!("n_sites={}\n", self.model.n_sites));

        let s = &self.model.standardizer;
        h.push_str("[standardizer]\n");
        h.push_str(&format!("loc_mean={}\n", join(&s.loc_mean)));
        h.push_str(&format!("loc_scale={}\n", join(&s.loc_scale)));
        h.push_str(&format!("patch_mean={}\n", s.patch_mean));
        h.push_str(&format!("patch_scale={}\n", s.patch_scale));

        h.push_str("[context]\n");
        h.push_str(&format!("origin={}\n", format_timestamp(&self.context.origin)));
        h.push_str(&format!("window_start={}\n", format_timestamp(&self.context.window.0)));
        h.push_str(&format!("window_end={}\n", format_timestamp(&self.context.window.1)));

        h.push_str("[sites]\n");
        for id in self.context.sites.ids() {
            check_token("site id", id)?;
            h.push_str(id);
            h.push('\n');
        }

        h.push_str("[folds]\n");
        for (id, f) in &self.folds {
            check_token("site id", id)?;
            h.push_str(&format!("{id}\t{f}\n"));
        }

        if let Some(st) = &self.state {
            let o = &st.optimizer;
            h.push_str("[train]\n");
            h.push_str(&format!("epochs_done={}\n", st.epochs_done));
            h.push_str(&format!("step={}\n", o.step));
            h.push_str(&format!("learning_rate={}\n", o.learning_rate));
            h.push_str(&format!("beta1={}\n", o.beta1));
            h.push_str(&format!("beta2={}\n", o.beta2));
            h.push_str(&format!("eps_hat={}\n", o.eps_hat));
            h.push_str("[history]\n");
            for e in &st.history {
                let eval = e.eval_nll.map_or("none".to_string(), |v| v.to_string());
                h.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.train_nll, eval, e.wall_seconds));
            }
        }

        let tensors = self.tensors();
        h.push_str("[tensors]\n");
        for (name, t) in &tensors {
            h.push_str(&format!("{name}\t{}\n", join(t.shape())));
        }
        h.push_str("[data]\n");
        w.write_all(h.as_bytes()).map_err(io)?;
        for (_, t) in &tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self> {
        let mut sections: Vec<(String, Vec<String>)> = Vec::new();
        let mut first = true;
        loop {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| Error::io("checkpoint", e))?;
            if n == 0 {
                return Err(bad("missing [data] section"));
            }
            let line = line.trim_end_matches(['\n', '\r']).to_string();
            if first {
                if line != FORMAT_LINE {
                    return Err(bad(format!("unrecognized format line {line:?}")));
                }
                first = false;
                continue;
            }
            if line == "[data]" {
                break;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.to_string(), Vec::new()));
            } else if let Some((_, lines)) = sections.last_mut() {
                lines.push(line);
            } else {
                return Err(bad(format!("line outside any section: {line:?}")));
            }
        }
        let section = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, l)| l.as_slice());
        let kv = |name: &str| -> Result<BTreeMap<String, String>> {
            let lines = section(name).ok_or_else(|| bad(format!("missing [{name}] section")))?;
            lines
                .iter()
                .map(|l| {
                    l.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| bad(format!("[{name}]: expected key=value, got {l:?}")))
                })
                .collect()
        };

        let config_echo: Vec<(String, String)> = section("config")
            .unwrap_or(&[])
            .iter()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| bad(format!("[config]: expected key=value, got {l:?}")))
            })
            .collect::<Result<_>>()?;

        let m = kv("model")?;
        let get = |map: &BTreeMap<String, String>, sec: &str, k: &str| -> Result<String> {
            map.get(k).cloned().ok_or_else(|| bad(format!("[{sec}] missing {k}")))
        };
        let config = NetworkConfig {
            conv_channels: parse_list(&get(&m, "model", "conv_channels")?)?,
            dense_widths: parse_list(&get(&m, "model", "dense_widths")?)?,
            outlier_hidden: parse_one(&get(&m, "model", "outlier_hidden")?)?,
            dropout_rate: parse_one(&get(&m, "model", "dropout_rate")?)?,
            kernel_size: parse_one(&get(&m, "model", "kernel_size")?)?,
            patch_size: parse_one(&get(&m, "model", "patch_size")?)?,
            patch_cell_m: parse_one(&get(&m, "model", "patch_cell_m")?)?,
        };
        let n_sites: usize = parse_one(&get(&m, "model", "n_sites")?)?;

        let s = kv("standardizer")?;
        let arr = |k: &str| -> Result<[f64; LOCATION_FEATURES]> {
            let v: Vec<f64> = parse_list(&get(&s, "standardizer", k)?)?;
            v.try_into()
                .map_err(|_| bad(format!("[standardizer] {k} needs {LOCATION_FEATURES} values")))
        };
        let standardizer = Standardizer {
            loc_mean: arr("loc_mean")?,
            loc_scale: arr("loc_scale")?,
            patch_mean: parse_one(&get(&s, "standardizer", "patch_mean")?)?,
            patch_scale: parse_one(&get(&s, "standardizer", "patch_scale")?)?,
        };

        let c = kv("context")?;
        let time = |k: &str| -> Result<DateTime<Utc>> {
            let v = get(&c, "context", k)?;
            parse_timestamp(&v).ok_or_else(|| bad(format!("bad {k} {v:?}")))
        };
        let origin = time("origin")?;
        let window = (time("window_start")?, time("window_end")?);
        let site_ids: Vec<String> = section("sites").unwrap_or(&[]).to_vec();
        let sites = SiteIndex::new(site_ids.clone());
        if sites.ids() != site_ids.as_slice() || sites.len() != n_sites {
            return Err(bad(format!("[sites] lists {} sites, model expects {n_sites}", site_ids.len())));
        }

        let mut folds = BTreeMap::new();
        for l in section("folds").unwrap_or(&[]) {
            let (id, f) = l.split_once('\t').ok_or_else(|| bad(format!("[folds]: bad line {l:?}")))?;
            folds.insert(id.to_string(), parse_one(f)?);
        }

        let mut model = build_model(&config, n_sites, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.standardizer = standardizer;

        let mut state = match section("train") {
            None => None,
            Some(_) => {
                let t = kv("train")?;
                let mut opt = OptimizerState::for_model(&model, parse_one(&get(&t, "train", "learning_rate")?)?);
                opt.step = parse_one(&get(&t, "train", "step")?)?;
                opt.beta1 = parse_one(&get(&t, "train", "beta1")?)?;
                opt.beta2 = parse_one(&get(&t, "train", "beta2")?)?;
                opt.eps_hat = parse_one(&get(&t, "train", "eps_hat")?)?;
                let mut history = Vec::new();
                for l in section("history").unwrap_or(&[]) {
                    let f: Vec<&str> = l.split('\t').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("[history]: bad line {l:?}")));
                    }
                    history.push(EpochMetrics {
                        epoch: parse_one(f[0])?,
                        train_nll: parse_one(f[1])?,
                        eval_nll: if f[2] == "none" { None } else { Some(parse_one(f[2])?) },
                        wall_seconds: parse_one(f[3])?,
                    });
                }
                Some(TrainState {
                    optimizer: opt,
                    epochs_done: parse_one(&get(&t, "train", "epochs_done")?)?,
                    history,
                })
            }
        };

        let declared: Vec<(String, Vec<usize>)> = section("tensors")
            .ok_or_else(|| bad("missing [tensors] section"))?
            .iter()
            .map(|l| {
                let (n, s) = l.split_once('\t').ok_or_else(|| bad(format!("[tensors]: bad line {l:?}")))?;
                Ok((n.to_string(), parse_list(s)?))
            })
            .collect::<Result<_>>()?;

        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("checkpoint", e))?;
        let mut offset = 0usize;
        let mut by_name: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, shape) in &declared {
            let len: usize = shape.iter().product();
            let end = offset + 4 * len;
            if end > bytes.len() {
                return Err(bad(format!("data truncated in {name}")));
            }
            let vals = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset = end;
            by_name.insert(name.clone(), vals);
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes after data", bytes.len() - offset)));
        }
        let shapes: BTreeMap<&str, &[usize]> = declared.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();

        let mut take = |name: &str, target: &mut Tensor<f32>| -> Result<()> {
            let shape = shapes.get(name).ok_or_else(|| bad(format!("tensor {name} missing")))?;
            if *shape != target.shape() {
                return Err(bad(format!("tensor {name}: shape {:?}, model expects {:?}", shape, target.shape())));
            }
            let vals = by_name.remove(name).expect("declared tensor");
            target.data_mut().copy_from_slice(&vals);
            Ok(())
        };
        let mut names = Vec::new();
        for (branch, g) in [("signal", &mut model.signal), ("outlier", &mut model.outlier)] {
            for p in g.params_mut() {
                let name = format!("{branch}/{}", p.name);
                take(&name, &mut p.value)?;
                names.push(name);
            }
        }
        if let Some(st) = state.as_mut() {
            for (i, n) in names.iter().enumerate() {
                take(&format!("adam.m/{n}"), &mut st.optimizer.m[i])?;
                take(&format!("adam.v/{n}"), &mut st.optimizer.v[i])?;
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        if model
            .signal
            .params()
            .iter()
            .chain(model.outlier.params())
            .any(|p| !p.value.is_finite())
        {
            return Err(bad("non-finite parameter values"));
        }

        Ok(Checkpoint {
            model,
            context: DataContext { origin, window, sites },
            folds,
            state,
            config_echo,
        })
    }
}

fn parse_one<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| bad(format!("cannot parse {s:?}")))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_one).collect()
}
