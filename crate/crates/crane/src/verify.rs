//! Recomputes LangSpec-F1 from published score tables and compares it with
//! the printed values.

use crane_core::corpus::LanguageId;
use crane_core::evaluation::{langspec_f1, ScoreRow, ScoreTable, TaskKind, DEFAULT_EPSILON};

use crate::CliError;

pub const TOLERANCE: f64 = 0.002;

/// Built-in fixtures as `(name, csv)`.
pub const FIXTURES: [(&str, &str); 3] = [
    ("table1", include_str!("../fixtures/table1.csv")),
    ("table2", include_str!("../fixtures/table2.csv")),
    ("table4", include_str!("../fixtures/table4.csv")),
];

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureRow {
    pub line: usize,
    pub method: String,
    pub mask_lang: LanguageId,
    pub scores: Vec<f64>,
    pub printed_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub languages: Vec<LanguageId>,
    pub original: Vec<f64>,
    pub rows: Vec<FixtureRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub method: String,
    pub mask_lang: LanguageId,
    pub recomputed: f64,
    pub printed: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        (self.recomputed - self.printed).abs() <= TOLERANCE
    }
}

fn format_err(name: &str, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("{name}:{line}: {msg}"))
}

/// Parses `method,mask_lang,<languages...>,printed_f1` with one `org` row.
/// Lines starting with `#` and blank lines are skipped.
pub fn parse_fixture(name: &str, text: &str) -> Result<Fixture, CliError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| format_err(name, 1, "empty fixture"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 5 || cols[0] != "method" || cols[1] != "mask_lang" || cols[cols.len() - 1] != "printed_f1" {
        return Err(format_err(name, hline, "header must be method,mask_lang,<languages>,printed_f1"));
    }
    let languages: Vec<LanguageId> = cols[2..cols.len() - 1].iter().map(|c| LanguageId::new(*c)).collect();
    let mut original = None;
    let mut rows = Vec::new();
    for (line, l) in lines {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != cols.len() {
            return Err(format_err(name, line, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let scores = f[2..f.len() - 1]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| format_err(name, line, format!("bad score {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if f[0] == "org" {
            if original.replace(scores).is_some() {
                return Err(format_err(name, line, "duplicate org row"));
            }
            continue;
        }
        let mask_lang = LanguageId::new(f[1]);
        if !languages.contains(&mask_lang) {
            return Err(format_err(name, line, format!("unknown mask language {:?}", f[1])));
        }
        let printed_f1 =
            f[f.len() - 1].parse::<f64>().map_err(|_| format_err(name, line, format!("bad printed F1 {:?}", f[f.len() - 1])))?;
        rows.push(FixtureRow { line, method: f[0].to_owned(), mask_lang, scores, printed_f1 });
    }
    let original = original.ok_or_else(|| format_err(name, hline, "no org row"))?;
    Ok(Fixture { languages, original, rows })
}

/// Recomputes every row's F1 against the `org` row.
pub fn check_fixture(fixture: &Fixture) -> Result<Vec<Check>, CliError> {
    fixture
        .rows
        .iter()
        .map(|r| {
            let table = ScoreTable {
                // Published scores include judge ratings, so no accuracy range check.
                kind: TaskKind::OpenendedSurrogate,
                rows: fixture
                    .languages
                    .iter()
                    .enumerate()
                    .map(|(i, l)| ScoreRow { language: l.clone(), original: fixture.original[i], masked: r.scores[i] })
                    .collect(),
            };
            let f1 = langspec_f1(&table, &r.mask_lang, DEFAULT_EPSILON)?;
            Ok(Check { method: r.method.clone(), mask_lang: r.mask_lang.clone(), recomputed: f1.langspec_f1, printed: r.printed_f1 })
        })
        .collect()
}

/// Prints one line per row and returns the number of mismatches.
pub fn verify(name: &str, text: &str) -> Result<usize, CliError> {
    let checks = check_fixture(&parse_fixture(name, text)?)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!(
            "{status} {name} {}/{}: recomputed {:.4} printed {:.4} (tolerance {TOLERANCE})",
            c.method, c.mask_lang, c.recomputed, c.printed
        );
    }
    Ok(failed)
}
