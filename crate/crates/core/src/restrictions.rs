//! Stability restrictions: free/fixed patterns on the impact matrix `G`,
//! its regime shift `Delta_G`, and the variance-change diagonal `Psi`,
//! compiled into explicit form
//!
//! ```text
//! vec(G)       = S_G  gamma + s_G
//! vec(Delta_G) = S_dG delta + s_dG
//! vecd(Psi)    = S_Psi psi  + s_Psi
//! ```
//!
//! with selection matrices `S_*` (one column per free parameter, ordered by
//! first appearance in column-major `vec` order) and offset vectors `s_*`
//! carrying the fixed values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::vech_len;

/// One cell of a restriction pattern: either a free parameter (optionally
/// named, so that target-IRF parameters can be referenced) or a fixed value.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Free(Option<String>),
    Fixed(f64),
}

impl Cell {
    pub fn free() -> Self {
        Cell::Free(None)
    }

    pub fn named(name: &str) -> Self {
        Cell::Free(Some(name.to_string()))
    }

    pub fn is_free(&self) -> bool {
        matches!(self, Cell::Free(_))
    }
}

/// Rectangular grid of [`Cell`]s. `G` / `Delta_G` patterns are
/// `(n+r) x (n+r)`; the `Psi` pattern is a single column of length `n+r`.
#[derive(Debug, Clone)]
pub struct PatternMatrix {
    nrows: usize,
    ncols: usize,
    cells: Vec<Cell>, // row-major
}

impl PatternMatrix {
    pub fn new(nrows: usize, ncols: usize, cells: Vec<Cell>) -> Result<Self> {
        if cells.len() != nrows * ncols {
            return Err(Error::Shape(format!(
                "pattern needs {} cells, got {}",
                nrows * ncols,
                cells.len()
            )));
        }
        Ok(PatternMatrix { nrows, ncols, cells })
    }

    /// All cells fixed to `value`.
    pub fn filled(nrows: usize, ncols: usize, value: f64) -> Self {
        PatternMatrix {
            nrows,
            ncols,
            cells: vec![Cell::Fixed(value); nrows * ncols],
        }
    }

    /// All cells free and unnamed.
    pub fn all_free(nrows: usize, ncols: usize) -> Self {
        PatternMatrix {
            nrows,
            ncols,
            cells: vec![Cell::free(); nrows * ncols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn get(&self, i: usize, j: usize) -> &Cell {
        &self.cells[i * self.ncols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, cell: Cell) -> &mut Self {
        self.cells[i * self.ncols + j] = cell;
        self
    }

}

/// Which of the three pattern blocks a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    G,
    DeltaG,
    Psi,
}

/// Compiled stability restrictions for an `(n+r)`-dimensional augmented
/// system. Immutable after compilation.
#[derive(Debug, Clone)]
pub struct Restrictions {
    n: usize,
    r: usize,
    k: usize,
    s_g: DMatrix<f64>,
    off_g: DVector<f64>,
    s_dg: DMatrix<f64>,
    off_dg: DVector<f64>,
    s_psi: DMatrix<f64>,
    off_psi: DVector<f64>,
    names: Vec<String>,
    blocks: Vec<Block>,
    theta_index: Vec<usize>,
}

/// Options controlling compilation.
#[derive(Debug, Clone, Default)]
pub struct CompileOptions {
    /// Number of target shocks (first `k` columns of `G`); drives the
    /// default choice of the target-IRF parameter subvector `theta`.
    pub k: usize,
    /// Explicit `theta` as a list of free-cell names; when `None`, `theta`
    /// defaults to all free cells in the first `k` columns of `G` and
    /// `Delta_G` plus the first `k` diagonal `Psi` entries.
    pub theta_names: Option<Vec<String>>,
    /// Allow the same name in several cells of one block, producing a
    /// selection column with several unit entries (equality constraint).
    /// Off by default.
    pub allow_equality: bool,
}

impl CompileOptions {
    pub fn with_k(k: usize) -> Self {
        CompileOptions { k, ..Default::default() }
    }
}

struct CompiledBlock {
    sel: DMatrix<f64>,
    off: DVector<f64>,
    names: Vec<String>,
    /// one representative vec-position per column, used for read-back
    representative: Vec<usize>,
}

/// Compiles one pattern into a selection matrix plus offset. `positions`
/// enumerates the pattern cells in vec order.
fn compile_block(
    pat: &PatternMatrix,
    vec_len: usize,
    positions: impl Iterator<Item = (usize, usize, usize)>, // (vecpos, i, j)
    prefix: &str,
    allow_equality: bool,
) -> Result<CompiledBlock> {
    let mut off = DVector::zeros(vec_len);
    let mut cols: Vec<Vec<usize>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (pos, i, j) in positions {
        match pat.get(i, j) {
            Cell::Fixed(v) => off[pos] = *v,
            Cell::Free(name) => {
                let name = name.clone().unwrap_or_else(|| {
                    if pat.ncols() == 1 {
                        format!("{prefix}({})", i + 1)
                    } else {
                        format!("{prefix}({},{})", i + 1, j + 1)
                    }
                });
                match names.iter().position(|n| *n == name) {
                    Some(c) if allow_equality => cols[c].push(pos),
                    Some(_) => {
                        return Err(Error::Pattern(format!(
                            "name {name} appears in more than one cell; \
                             equality constraints are disabled"
                        )))
                    }
                    None => {
                        names.push(name);
                        cols.push(vec![pos]);
                    }
                }
            }
        }
    }
    let mut sel = DMatrix::zeros(vec_len, cols.len());
    let mut representative = Vec::with_capacity(cols.len());
    for (c, rows) in cols.iter().enumerate() {
        representative.push(rows[0]);
        for &p in rows {
            sel[(p, c)] = 1.0;
        }
    }
    Ok(CompiledBlock { sel, off, names, representative })
}

impl Restrictions {
    /// Compiles the three patterns for an augmented system with `n`
    /// endogenous variables and `r` proxies.
    ///
    /// The top-right `n x r` block of `G` and `Delta_G` must be fixed to
    /// zero (measurement errors never load on the VAR variables), and fixed
    /// `Psi` entries must be strictly positive.
    pub fn compile(
        n: usize,
        r: usize,
        pat_g: &PatternMatrix,
        pat_dg: &PatternMatrix,
        pat_psi: &PatternMatrix,
        opts: &CompileOptions,
    ) -> Result<Self> {
        let m = n + r;
        for (pat, what) in [(pat_g, "G"), (pat_dg, "DELTA_G")] {
            if pat.nrows() != m || pat.ncols() != m {
                return Err(Error::Shape(format!(
                    "{what} pattern must be {m}x{m}, got {}x{}",
                    pat.nrows(),
                    pat.ncols()
                )));
            }
            for i in 0..n {
                for j in n..m {
                    match pat.get(i, j) {
                        Cell::Fixed(v) if *v == 0.0 => {}
                        _ => {
                            return Err(Error::Pattern(format!(
                                "{what}({},{}) lies in the top-right block and must be \
                                 fixed to zero: measurement errors do not load on the \
                                 endogenous variables",
                                i + 1,
                                j + 1
                            )))
                        }
                    }
                }
            }
        }
        if pat_psi.nrows() != m || pat_psi.ncols() != 1 {
            return Err(Error::Shape(format!(
                "PSI_DIAG pattern must have length {m}, got {}x{}",
                pat_psi.nrows(),
                pat_psi.ncols()
            )));
        }
        for i in 0..m {
            if let Cell::Fixed(v) = pat_psi.get(i, 0) {
                if !(*v > 0.0) {
                    return Err(Error::Domain(format!(
                        "PSI_DIAG({}) is fixed to {v}, but variance ratios must be positive",
                        i + 1
                    )));
                }
            }
        }
        if opts.k > n {
            return Err(Error::Domain(format!("k = {} exceeds n = {n}", opts.k)));
        }

        // vec order for an m x m matrix is column-major
        let square_positions = |pat: &PatternMatrix| {
            let m = pat.nrows();
            (0..m)
                .flat_map(move |j| (0..m).map(move |i| (j * m + i, i, j)))
                .collect::<Vec<_>>()
        };
        let g = compile_block(pat_g, m * m, square_positions(pat_g).into_iter(), "g", opts.allow_equality)?;
        let dg =
            compile_block(pat_dg, m * m, square_positions(pat_dg).into_iter(), "dg", opts.allow_equality)?;
        let psi = compile_block(
            pat_psi,
            m,
            (0..m).map(|i| (i, i, 0)),
            "psi",
            opts.allow_equality,
        )?;

        let names: Vec<String> = g
            .names
            .iter()
            .chain(dg.names.iter())
            .chain(psi.names.iter())
            .cloned()
            .collect();
        let blocks: Vec<Block> = std::iter::repeat_n(Block::G, g.names.len())
            .chain(std::iter::repeat_n(Block::DeltaG, dg.names.len()))
            .chain(std::iter::repeat_n(Block::Psi, psi.names.len()))
            .collect();

        let theta_index = match &opts.theta_names {
            Some(list) => {
                let mut idx = Vec::with_capacity(list.len());
                for name in list {
                    match names.iter().position(|n| n == name) {
                        Some(p) => idx.push(p),
                        None => {
                            return Err(Error::Pattern(format!(
                                "theta references unknown free cell {name}"
                            )))
                        }
                    }
                }
                idx
            }
            None => {
                // free cells in the first k columns of G and Delta_G plus
                // the first k Psi entries
                let mut idx = Vec::new();
                let in_first_k = |rep: usize| rep / m < opts.k;
                for (c, &rep) in g.representative.iter().enumerate() {
                    if in_first_k(rep) {
                        idx.push(c);
                    }
                }
                let a = g.names.len();
                for (c, &rep) in dg.representative.iter().enumerate() {
                    if in_first_k(rep) {
                        idx.push(a + c);
                    }
                }
                let ab = a + dg.names.len();
                for (c, &rep) in psi.representative.iter().enumerate() {
                    if rep < opts.k {
                        idx.push(ab + c);
                    }
                }
                idx
            }
        };

        Ok(Restrictions {
            n,
            r,
            k: opts.k,
            s_g: g.sel,
            off_g: g.off,
            s_dg: dg.sel,
            off_dg: dg.off,
            s_psi: psi.sel,
            off_psi: psi.off,
            names,
            blocks,
            theta_index,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// System dimension `n + r`.
    pub fn m(&self) -> usize {
        self.n + self.r
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Free-parameter counts per block.
    pub fn a(&self) -> usize {
        self.s_g.ncols()
    }

    pub fn b(&self) -> usize {
        self.s_dg.ncols()
    }

    pub fn c(&self) -> usize {
        self.s_psi.ncols()
    }

    /// Total number of free parameters `a + b + c`.
    pub fn n_params(&self) -> usize {
        self.a() + self.b() + self.c()
    }

    /// Number of moment conditions `(n+r)(n+r+1)` = two stacked vech blocks.
    pub fn n_moments(&self) -> usize {
        2 * vech_len(self.m())
    }

    /// Order condition `a + b + c <= (n+r)(n+r+1)`.
    pub fn order_condition_ok(&self) -> bool {
        self.n_params() <= self.n_moments()
    }

    pub fn s_g(&self) -> &DMatrix<f64> {
        &self.s_g
    }

    pub fn s_dg(&self) -> &DMatrix<f64> {
        &self.s_dg
    }

    pub fn s_psi(&self) -> &DMatrix<f64> {
        &self.s_psi
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn theta_index(&self) -> &[usize] {
        &self.theta_index
    }

    /// Splits a full parameter vector into `(gamma, delta, psi)` parts.
    pub fn split(&self, varsigma: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if varsigma.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "parameter vector must have length {}, got {}",
                self.n_params(),
                varsigma.len()
            )));
        }
        let (a, b, c) = (self.a(), self.b(), self.c());
        Ok((
            varsigma.rows(0, a).clone_owned(),
            varsigma.rows(a, b).clone_owned(),
            varsigma.rows(a + b, c).clone_owned(),
        ))
    }

    /// Rebuilds `(G, Delta_G, diag(Psi))` from a parameter vector.
    ///
    /// Fails when any implied `Psi` entry is not strictly positive (the
    /// optimizer works in `log psi`, so this only triggers on direct misuse).
    pub fn reconstruct(
        &self,
        varsigma: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
        let (gamma, delta, psi) = self.split(varsigma)?;
        let m = self.m();
        let vec_g = &self.s_g * gamma + &self.off_g;
        let vec_dg = &self.s_dg * delta + &self.off_dg;
        let psi_diag = &self.s_psi * psi + &self.off_psi;
        if let Some(i) = psi_diag.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::Domain(format!(
                "Psi({}) = {} must be strictly positive",
                i + 1,
                psi_diag[i]
            )));
        }
        let g = DMatrix::from_column_slice(m, m, vec_g.as_slice());
        let dg = DMatrix::from_column_slice(m, m, vec_dg.as_slice());
        Ok((g, dg, psi_diag))
    }

    /// Reads the free parameters back from concrete matrices (the inverse of
    /// [`Restrictions::reconstruct`] on the free cells; fixed cells are
    /// ignored).
    pub fn read_back(
        &self,
        g: &DMatrix<f64>,
        dg: &DMatrix<f64>,
        psi_diag: &DVector<f64>,
    ) -> DVector<f64> {
        let m = self.m();
        let mut out = DVector::zeros(self.n_params());
        let mut k = 0;
        for sel in [&self.s_g, &self.s_dg] {
            let src = if std::ptr::eq(sel, &self.s_g) { g } else { dg };
            for c in 0..sel.ncols() {
                let pos = (0..m * m).find(|&p| sel[(p, c)] == 1.0).expect("empty column");
                out[k] = src[(pos % m, pos / m)];
                k += 1;
            }
        }
        for c in 0..self.s_psi.ncols() {
            let pos = (0..m).find(|&p| self.s_psi[(p, c)] == 1.0).expect("empty column");
            out[k] = psi_diag[pos];
            k += 1;
        }
        out
    }

    /// Whether flipping the sign of column `col` of `G` and `Delta_G`
    /// jointly stays inside the restriction set, i.e. every fixed cell in
    /// that column is zero.
    pub fn column_flip_admissible(&self, col: usize) -> bool {
        let m = self.m();
        (0..m).all(|i| {
            let pos = col * m + i;
            let g_free = self.s_g.row(pos).iter().any(|v| *v != 0.0);
            let dg_free = self.s_dg.row(pos).iter().any(|v| *v != 0.0);
            (g_free || self.off_g[pos] == 0.0) && (dg_free || self.off_dg[pos] == 0.0)
        })
    }

    /// Test/advanced constructor from raw compiled parts.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        n: usize,
        r: usize,
        k: usize,
        s_g: DMatrix<f64>,
        off_g: DVector<f64>,
        s_dg: DMatrix<f64>,
        off_dg: DVector<f64>,
        s_psi: DMatrix<f64>,
        off_psi: DVector<f64>,
        names: Vec<String>,
        blocks: Vec<Block>,
        theta_index: Vec<usize>,
    ) -> Self {
        Restrictions {
            n,
            r,
            k,
            s_g,
            off_g,
            s_dg,
            off_dg,
            s_psi,
            off_psi,
            names,
            blocks,
            theta_index,
        }
    }
}

// ---------------------------------------------------------------------------
// Restriction-file parser
// ---------------------------------------------------------------------------

/// The three patterns read from a restriction file.
#[derive(Debug, Clone)]
pub struct ParsedPatterns {
    pub g: PatternMatrix,
    pub delta_g: PatternMatrix,
    pub psi: PatternMatrix,
}

/// Parses the textual restriction format: three sections `[G]`,
/// `[DELTA_G]`, `[PSI_DIAG]`, one matrix row per line, cells separated by
/// whitespace. A cell is `.` (free), a numeric literal (fixed), or an
/// identifier (named free parameter). `#` starts a comment.
pub fn parse_restriction_file(text: &str) -> Result<ParsedPatterns> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        G,
        DeltaG,
        Psi,
    }
    let mut section = Section::None;
    let mut rows_g: Vec<Vec<Cell>> = Vec::new();
    let mut rows_dg: Vec<Vec<Cell>> = Vec::new();
    let mut rows_psi: Vec<Vec<Cell>> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = match trimmed {
                "[G]" => Section::G,
                "[DELTA_G]" => Section::DeltaG,
                "[PSI_DIAG]" => Section::Psi,
                other => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        col: line.find('[').unwrap_or(0) + 1,
                        msg: format!(
                            "unknown section {other}; expected [G], [DELTA_G] or [PSI_DIAG]"
                        ),
                    })
                }
            };
            continue;
        }
        let target = match section {
            Section::G => &mut rows_g,
            Section::DeltaG => &mut rows_dg,
            Section::Psi => &mut rows_psi,
            Section::None => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    col: 1,
                    msg: "cell data before any section header".into(),
                })
            }
        };
        let mut row = Vec::new();
        let mut col_offset = 0usize;
        for token in line.split_whitespace() {
            let col = line[col_offset..]
                .find(token)
                .map(|p| p + col_offset)
                .unwrap_or(col_offset);
            col_offset = col + token.len();
            row.push(parse_cell(token, lineno + 1, col + 1)?);
        }
        target.push(row);
    }

    let g = rows_to_pattern(rows_g, "G")?;
    let delta_g = rows_to_pattern(rows_dg, "DELTA_G")?;
    let psi_rows = rows_to_pattern(rows_psi, "PSI_DIAG")?;
    // PSI_DIAG may be written as one row or one column; normalize to a column
    let psi = if psi_rows.ncols() == 1 {
        psi_rows
    } else if psi_rows.nrows() == 1 {
        let cells = (0..psi_rows.ncols()).map(|j| psi_rows.get(0, j).clone()).collect();
        PatternMatrix::new(psi_rows.ncols(), 1, cells)?
    } else {
        return Err(Error::Pattern(format!(
            "PSI_DIAG must be a single row or column, got {}x{}",
            psi_rows.nrows(),
            psi_rows.ncols()
        )));
    };
    Ok(ParsedPatterns { g, delta_g, psi })
}

fn parse_cell(token: &str, line: usize, col: usize) -> Result<Cell> {
    if token == "." {
        return Ok(Cell::free());
    }
    if let Ok(v) = token.parse::<f64>() {
        return Ok(Cell::Fixed(v));
    }
    let mut chars = token.chars();
    let head_ok = chars.next().map(|c| c.is_ascii_alphabetic() || c == '_').unwrap_or(false);
    if head_ok && chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Ok(Cell::named(token));
    }
    Err(Error::Parse {
        line,
        col,
        msg: format!("cannot read cell {token:?}: expected '.', a number, or a name"),
    })
}

fn rows_to_pattern(rows: Vec<Vec<Cell>>, what: &str) -> Result<PatternMatrix> {
    if rows.is_empty() {
        return Err(Error::Pattern(format!("missing section [{what}]")));
    }
    let ncols = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::Pattern(format!(
                "[{what}] row {} has {} cells, expected {}",
                i + 1,
                row.len(),
                ncols
            )));
        }
    }
    let nrows = rows.len();
    PatternMatrix::new(nrows, ncols, rows.into_iter().flatten().collect())
}
