//! Inspection of the hypothesis-test loop on one example: memory keys,
//! gates or halting scores per step, and the document words attended most.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Example, Vocabulary};
use crate::error::{NseError, Result};
use crate::hypothesis::HaltingMode;
use crate::model::NseModel;
use crate::prediction::select_answer;

/// One attended document position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttendedWord {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub mode: HaltingMode,
    pub query_tokens: Vec<String>,
    /// `z^q` per step, one row per step and one column per query token.
    pub z: Vec<Vec<f64>>,
    /// Query gates per step (gating mode).
    pub g: Option<Vec<Vec<f64>>>,
    /// Termination scores per step; the last step has none (adaptive mode).
    pub e: Option<Vec<Option<f64>>>,
    /// Halting probabilities per step (adaptive mode).
    pub p: Option<Vec<f64>>,
    pub top_words: Vec<Vec<AttendedWord>>,
    pub candidates: Vec<String>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
}

pub fn trace_example(model: &NseModel, example: &Example, vocab: &Vocabulary, mode: HaltingMode) -> Result<Trace> {
    let input = example.to_input()?;
    let pred = model.predict(&input, mode)?;
    let top_words = pred
        .doc_attention
        .iter()
        .map(|att| {
            let mut order: Vec<usize> = (0..att.len()).collect();
            order.sort_by(|&a, &b| att[b].total_cmp(&att[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .take(3)
                .map(|i| AttendedWord { position: i, token: vocab.token(example.document[i]).to_string(), weight: att[i] })
                .collect()
        })
        .collect();
    let steps = &pred.steps;
    let g = (!mode.is_adaptive())
        .then(|| steps.iter().map(|s| s.g_q.clone()).collect::<Option<Vec<_>>>())
        .flatten();
    let predicted = select_answer(&pred.distribution.probs)?;
    Ok(Trace {
        mode,
        query_tokens: example.query.iter().map(|&t| vocab.token(t).to_string()).collect(),
        z: steps.iter().map(|s| s.z_q.clone()).collect(),
        g,
        e: mode.is_adaptive().then(|| steps.iter().map(|s| s.e).collect()),
        p: pred.halting.clone(),
        top_words,
        candidates: example.candidates.iter().map(|&t| vocab.token(t).to_string()).collect(),
        probs: pred.distribution.probs,
        predicted,
        gold: input.gold,
    })
}

fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| NseError::invalid(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| NseError::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Comma-separated grid with a header row of column labels.
pub fn grid_csv(columns: &[String], rows: &[Vec<f64>]) -> Result<String> {
    csv_text(columns, rows.iter().map(|r| r.iter().map(|x| x.to_string()).collect()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Linear ramp from dark (0) to light (1).
fn color(v: f64) -> String {
    const DARK: [f64; 3] = [20.0, 24.0, 82.0];
    const LIGHT: [f64; 3] = [250.0, 246.0, 210.0];
    let t = v.clamp(0.0, 1.0);
    let c: Vec<String> = DARK
        .iter()
        .zip(&LIGHT)
        .map(|(d, l)| format!("{:02x}", (d + (l - d) * t).round() as u8))
        .collect();
    format!("#{}", c.concat())
}

/// Standalone SVG heatmap: rows are steps, columns are labelled cells.
/// Missing values are drawn grey.
pub fn heatmap_svg(title: &str, columns: &[String], rows: &[Vec<Option<f64>>]) -> String {
    const CELL_W: usize = 56;
    const CELL_H: usize = 28;
    const LEFT: usize = 48;
    const TOP: usize = 64;
    let width = LEFT + CELL_W * columns.len().max(1) + 8;
    let height = TOP + CELL_H * rows.len() + 8;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="4" y="16" font-size="13">{}</text>"#, escape(title));
    for (j, c) in columns.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, TOP - 8, escape(c));
    }
    for (i, row) in rows.iter().enumerate() {
        let y = TOP + i * CELL_H;
        let _ = writeln!(s, r#"<text x="4" y="{}">t={}</text>"#, y + CELL_H / 2 + 4, i + 1);
        for (j, v) in row.iter().enumerate() {
            let x = LEFT + j * CELL_W;
            let (fill, label, ink) = match v {
                Some(v) => (color(*v), format!("{v:.2}"), if *v < 0.5 { "white" } else { "black" }),
                None => ("#9e9e9e".to_string(), "-".to_string(), "black"),
            };
            let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="white"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{label}</text>"#,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn wrap(rows: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    rows.iter().map(|r| r.iter().map(|&x| Some(x)).collect()).collect()
}

impl Trace {
    pub fn steps(&self) -> usize {
        self.z.len()
    }

    fn halting_rows(&self) -> Option<Vec<Vec<Option<f64>>>> {
        let (e, p) = (self.e.as_ref()?, self.p.as_ref()?);
        Some(e.iter().zip(p).map(|(&e, &p)| vec![e, Some(p)]).collect())
    }

    /// Writes grids, heatmaps and the attended-word table into `dir` and
    /// returns the paths written.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| NseError::io(dir, e))?;
        let mut files: Vec<(String, String)> = Vec::new();
        let q = &self.query_tokens;
        files.push(("z.csv".into(), grid_csv(q, &self.z)?));
        files.push(("z.svg".into(), heatmap_svg("memory key z (per step x query token)", q, &wrap(&self.z))));
        if let Some(g) = &self.g {
            files.push(("g.csv".into(), grid_csv(q, g)?));
            files.push(("g.svg".into(), heatmap_svg("query gate g (per step x query token)", q, &wrap(g))));
        }
        if let Some(rows) = self.halting_rows() {
            let header = ["e".to_string(), "p".to_string()];
            let text = rows.iter().map(|r| r.iter().map(|x| x.map(|v| v.to_string()).unwrap_or_default()).collect());
            files.push(("halting.csv".into(), csv_text(&header, text)?));
            files.push(("halting.svg".into(), heatmap_svg("termination e and halting p", &header, &rows)));
        }
        let header: Vec<String> = ["step", "rank", "position", "token", "weight"].map(String::from).to_vec();
        let rows = self.top_words.iter().enumerate().flat_map(|(t, words)| {
            words.iter().enumerate().map(move |(r, w)| {
                vec![(t + 1).to_string(), (r + 1).to_string(), w.position.to_string(), w.token.clone(), w.weight.to_string()]
            })
        });
        files.push(("top_words.csv".into(), csv_text(&header, rows)?));
        let answer = csv_text(
            &["candidate".into(), "probability".into(), "predicted".into(), "gold".into()],
            self.candidates.iter().zip(&self.probs).enumerate().map(|(i, (c, p))| {
                vec![c.clone(), p.to_string(), (i == self.predicted).to_string(), (i == self.gold).to_string()]
            }),
        )?;
        files.push(("answer.csv".into(), answer));
        files
            .into_iter()
            .map(|(name, body)| {
                let path = dir.join(name);
                fs::write(&path, body).map_err(|e| NseError::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}
