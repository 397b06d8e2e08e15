//! Plain-text model checkpoints.
//!
//! ```text
//! fedconf-checkpoint v1
//! layers <L>
//! layer <in_dim> <out_dim> <relu|identity>     (L lines)
//! params <P>
//! <value>                                       (P lines, flatten_params order)
//! ```
//!
//! Values use Rust's shortest round-trip `f64` formatting, so a load after a
//! save reproduces every parameter bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{flatten_params, unflatten_params, LayerSpec, MlpModel};

const MAGIC: &str = "fedconf-checkpoint v1";

pub fn model_to_text(model: &MlpModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "layers {}", model.num_layers());
    for s in model.specs() {
        let _ = writeln!(out, "layer {} {} {}", s.in_dim, s.out_dim, s.activation);
    }
    let flat = flatten_params(model);
    let _ = writeln!(out, "params {}", flat.len());
    for v in flat.data() {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn model_from_text(text: &str) -> Result<MlpModel> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(Error::Format(format!("missing `{MAGIC}` header"))),
    }
    let (ln, l) = lines.next().ok_or_else(|| parse_err(2, "missing layer count".into()))?;
    let n_layers: usize = l
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(ln, format!("expected `layers <n>`, got `{l}`")))?;

    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (ln, l) = lines
            .next()
            .ok_or_else(|| parse_err(ln, "truncated layer list".into()))?;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "layer" {
            return Err(parse_err(ln, format!("expected `layer <in> <out> <act>`, got `{l}`")));
        }
        let dim = |s: &str| s.parse::<usize>().map_err(|e| parse_err(ln, e.to_string()));
        specs.push(LayerSpec::new(dim(fields[1])?, dim(fields[2])?, fields[3].parse()?));
    }

    let (ln, l) = lines.next().ok_or_else(|| parse_err(0, "missing params line".into()))?;
    let n_params: usize = l
        .strip_prefix("params ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| parse_err(ln, format!("expected `params <n>`, got `{l}`")))?;
    let mut flat = Vec::with_capacity(n_params);
    for (ln, l) in lines.by_ref().take(n_params) {
        flat.push(
            l.parse::<f64>()
                .map_err(|e| parse_err(ln, format!("bad value `{l}`: {e}")))?,
        );
    }
    if flat.len() != n_params {
        return Err(Error::Format(format!(
            "checkpoint declares {n_params} parameters but holds {}",
            flat.len()
        )));
    }
    unflatten_params(&specs, &flat)
}

pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_text(&text)
}
