//! Plain-text artifact formats.
//!
//! Every real number is written with 17 significant digits (`{:.16e}`), which
//! round-trips an `f64` exactly.
//!
//! **Parameter file** (models and checkpoints), one `key value` per line, then
//! one parameter per line in the flat order documented in [`crate::model`]:
//!
//! ```text
//! veilscan-params v1
//! input_dim 8
//! hidden_dim 8
//! l2 1.0000000000000000e-3
//! epoch 3
//! param_count 81
//! -1.2345678901234567e-1
//! ...
//! ```
//!
//! **Corpus file**: tab-separated, header
//! `id cohort gold_label observed_label teacher_score features`, features as
//! comma-separated decimals.
//!
//! **Influence dump**: tab-separated, header `trn_id prb_id method score`,
//! `-` for the missing probe of training loss, rows ordered by
//! (method, prb_id, trn_id).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::example::{Example, ExampleId, Label};
use crate::influence::{InfluenceScore, Method};
use crate::model::{Architecture, Checkpoint, StudentModel};
use crate::surfacing::{EvalReport, RankHistogram};

const PARAMS_MAGIC: &str = "veilscan-params v1";
const CORPUS_HEADER: &str = "id\tcohort\tgold_label\tobserved_label\tteacher_score\tfeatures";
const INFLUENCE_HEADER: &str = "trn_id\tprb_id\tmethod\tscore";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| Error::parse(what, line, format!("{s:?}: {e}")))
}

fn parse_int<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse::<T>().map_err(|e| Error::parse(what, line, format!("{s:?}: {e}")))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and renames, so readers never see a partial file.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn params_to_string(model: &StudentModel, epoch: usize) -> String {
    let arch = model.architecture();
    let mut s = String::with_capacity(32 * model.param_count() + 128);
    let _ = writeln!(s, "{PARAMS_MAGIC}");
    let _ = writeln!(s, "input_dim {}", arch.input_dim);
    let _ = writeln!(s, "hidden_dim {}", arch.hidden_dim);
    let _ = writeln!(s, "l2 {}", fmt_f64(model.l2()));
    let _ = writeln!(s, "epoch {epoch}");
    let _ = writeln!(s, "param_count {}", model.param_count());
    for p in model.params() {
        let _ = writeln!(s, "{}", fmt_f64(*p));
    }
    s
}

/// Returns the model and its recorded epoch.
pub fn params_from_str(text: &str) -> Result<(StudentModel, usize)> {
    const WHAT: &str = "parameter file";
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == PARAMS_MAGIC => {}
        _ => return Err(Error::parse(WHAT, 1, format!("expected {PARAMS_MAGIC:?}"))),
    }
    let mut field = |key: &str| -> Result<(usize, String)> {
        let (n, line) = lines.next().ok_or_else(|| Error::parse(WHAT, 0, format!("missing {key}")))?;
        let value = line
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::parse(WHAT, n, format!("expected `{key} <value>`")))?;
        Ok((n, value.to_string()))
    };
    let (n, v) = field("input_dim")?;
    let input_dim = parse_int::<usize>(&v, WHAT, n)?;
    let (n, v) = field("hidden_dim")?;
    let hidden_dim = parse_int::<usize>(&v, WHAT, n)?;
    let (n, v) = field("l2")?;
    let l2 = parse_f64(&v, WHAT, n)?;
    let (n, v) = field("epoch")?;
    let epoch = parse_int::<usize>(&v, WHAT, n)?;
    let (n, v) = field("param_count")?;
    let count = parse_int::<usize>(&v, WHAT, n)?;
    let arch = Architecture::new(input_dim, hidden_dim);
    if count != arch.param_count() {
        return Err(Error::parse(WHAT, n, format!("param_count {count} does not match architecture ({})", arch.param_count())));
    }
    let params = lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| parse_f64(l, WHAT, n))
        .collect::<Result<Vec<_>>>()?;
    if params.len() != count {
        return Err(Error::parse(WHAT, 0, format!("expected {count} parameters, found {}", params.len())));
    }
    Ok((StudentModel::from_params(arch, params, l2)?, epoch))
}

pub fn write_model(path: &Path, model: &StudentModel, epoch: usize) -> Result<()> {
    write_text(path, &params_to_string(model, epoch))
}

pub fn read_model(path: &Path) -> Result<(StudentModel, usize)> {
    params_from_str(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_model(path, &ck.model, ck.epoch)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (model, epoch) = read_model(path)?;
    Ok(Checkpoint { epoch, model })
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { what, line, reason } => Error::Parse { what: format!("{what} {}", path.display()), line, reason },
        other => other,
    }
}

pub fn corpus_to_string(examples: &[Example]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CORPUS_HEADER}");
    for e in examples {
        let feats: Vec<String> = e.features.iter().map(|x| fmt_f64(*x)).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.cohort,
            e.gold_label,
            e.observed_label,
            fmt_f64(e.teacher_score),
            feats.join(",")
        );
    }
    s
}

pub fn corpus_from_str(text: &str) -> Result<Vec<Example>> {
    const WHAT: &str = "corpus file";
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == CORPUS_HEADER => {}
        _ => return Err(Error::parse(WHAT, 1, "missing header")),
    }
    let label = |s: &str, n| -> Result<Label> {
        Label::try_from(parse_int::<u8>(s, WHAT, n)?).map_err(|e| Error::parse(WHAT, n, e))
    };
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 6 {
                return Err(Error::parse(WHAT, n, format!("expected 6 columns, found {}", cols.len())));
            }
            let features = if cols[5].is_empty() {
                vec![]
            } else {
                cols[5].split(',').map(|f| parse_f64(f, WHAT, n)).collect::<Result<_>>()?
            };
            Ok(Example {
                id: parse_int(cols[0], WHAT, n)?,
                cohort: cols[1].parse().map_err(|_| Error::parse(WHAT, n, format!("bad cohort {:?}", cols[1])))?,
                gold_label: label(cols[2], n)?,
                observed_label: label(cols[3], n)?,
                teacher_score: parse_f64(cols[4], WHAT, n)?,
                features,
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, examples: &[Example]) -> Result<()> {
    write_text(path, &corpus_to_string(examples))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Example>> {
    corpus_from_str(&read_text(path)?).map_err(|e| with_path(e, path))
}

/// Sorts into the canonical (method, prb_id, trn_id) order and renders.
pub fn influence_to_string(scores: &[InfluenceScore]) -> String {
    let mut rows: Vec<&InfluenceScore> = scores.iter().collect();
    rows.sort_by_key(|s| (s.method, s.prb_id, s.trn_id));
    let mut s = String::with_capacity(48 * rows.len() + 32);
    let _ = writeln!(s, "{INFLUENCE_HEADER}");
    for r in rows {
        let prb = r.prb_id.map_or_else(|| "-".to_string(), |p| p.to_string());
        let _ = writeln!(s, "{}\t{}\t{}\t{}", r.trn_id, prb, r.method, fmt_f64(r.score));
    }
    s
}

pub fn influence_from_str(text: &str) -> Result<Vec<InfluenceScore>> {
    const WHAT: &str = "influence dump";
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == INFLUENCE_HEADER => {}
        _ => return Err(Error::parse(WHAT, 1, "missing header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::parse(WHAT, n, format!("expected 4 columns, found {}", cols.len())));
            }
            let prb_id: Option<ExampleId> = if cols[1] == "-" { None } else { Some(parse_int(cols[1], WHAT, n)?) };
            Ok(InfluenceScore {
                trn_id: parse_int(cols[0], WHAT, n)?,
                prb_id,
                method: cols[2].parse::<Method>().map_err(|e| Error::parse(WHAT, n, e.to_string()))?,
                score: parse_f64(cols[3], WHAT, n)?,
            })
        })
        .collect()
}

/// One row of the veiled-count table.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRow {
    pub label: String,
    pub counts: Vec<f64>,
}

/// Method × k table of veiled offenses found in the top k.
pub fn precision_table_to_string(ks: &[usize], rows: &[PrecisionRow]) -> String {
    let mut s = String::from("method");
    for k in ks {
        let _ = write!(s, "\t@{k}");
    }
    s.push('\n');
    for row in rows {
        s.push_str(&row.label);
        for c in &row.counts {
            if c.fract() == 0.0 {
                let _ = write!(s, "\t{c:.0}");
            } else {
                let _ = write!(s, "\t{c:.1}");
            }
        }
        s.push('\n');
    }
    s
}

/// Model / operation × VO, NO, OO class recall.
pub fn recall_table_to_string(rows: &[(String, String, EvalReport)]) -> String {
    let mut s = String::from("model\toperation\tVO\tNO\tOO\n");
    for (model, op, r) in rows {
        let [vo, no, oo] = r.recalls();
        let _ = writeln!(s, "{model}\t{op}\t{vo:.1}\t{no:.1}\t{oo:.1}");
    }
    s
}

/// `(cohort, bin, count)` rows for external plotting.
pub fn histogram_to_string(h: &RankHistogram) -> String {
    let mut s = String::from("cohort\tbin\tcount\n");
    for (cohort, counts) in &h.counts {
        for (b, c) in counts.iter().enumerate() {
            let _ = writeln!(s, "{cohort}\t{b}\t{c}");
        }
    }
    s
}
