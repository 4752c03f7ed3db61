//! Time-series ingestion, role tagging and the lagged-table conversion.
//!
//! A [`TimeSeriesDataset`] holds `T` observations of `V` named series. Each
//! series is a covariate, the prediction target, or the prediction error of
//! the model under diagnosis. [`to_lagged`] unrolls the series into a table
//! whose columns are players `(variable, lag)` for lags `0..=tau_max`, in
//! lag-major order: every variable at lag 0 in file order, then every
//! variable at lag 1, and so on.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariableRole {
    Covariate,
    Target,
    PredictionError,
}

impl fmt::Display for VariableRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariableRole::Covariate => "covariate",
            VariableRole::Target => "target",
            VariableRole::PredictionError => "prediction_error",
        })
    }
}

/// One column of the lagged table: a variable observed `lag` steps back.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Player {
    pub name: String,
    pub lag: usize,
}

impl Player {
    pub fn new(name: impl Into<String>, lag: usize) -> Self {
        Player { name: name.into(), lag }
    }
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.lag)
    }
}

/// `T x V` matrix of role-tagged series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    names: Vec<String>,
    roles: Vec<VariableRole>,
    values: DMatrix<f64>,
    time_labels: Option<Vec<String>>,
}

impl TimeSeriesDataset {
    /// Validates shape, finiteness, unique names and the role constraints:
    /// exactly one target, at least one covariate and at most one
    /// prediction-error column. Generated scenarios carry no error column
    /// until a predictor has been applied; use [`Self::error_index`] where
    /// one is required.
    pub fn new(names: Vec<String>, roles: Vec<VariableRole>, values: DMatrix<f64>) -> Result<Self> {
        if names.len() != roles.len() || names.len() != values.ncols() {
            return Err(Error::Dataset(format!(
                "{} names, {} roles, {} columns",
                names.len(),
                roles.len(),
                values.ncols()
            )));
        }
        if values.nrows() < 2 {
            return Err(Error::Dataset(format!("need at least 2 time steps, got {}", values.nrows())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Dataset(format!("duplicate column name {n:?}")));
            }
        }
        if let Some((i, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (i % values.nrows(), i / values.nrows());
            return Err(Error::BadCell { row, column: names[col].clone(), value: values[(row, col)].to_string() });
        }
        check_roles(&names, &roles)?;
        Ok(TimeSeriesDataset { names, roles, values, time_labels: None })
    }

    pub fn with_time_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_times() {
            return Err(Error::Dataset(format!("{} time labels for {} rows", labels.len(), self.n_times())));
        }
        self.time_labels = Some(labels);
        Ok(self)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[VariableRole] {
        &self.roles
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn time_labels(&self) -> Option<&[String]> {
        self.time_labels.as_deref()
    }

    pub fn n_times(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, p: usize) -> Vec<f64> {
        self.values.column(p).iter().copied().collect()
    }

    pub fn target_index(&self) -> usize {
        self.roles.iter().position(|r| *r == VariableRole::Target).expect("validated in new")
    }

    /// Index of the prediction-error column, or a role diagnostic.
    pub fn error_index(&self) -> Result<usize> {
        self.roles.iter().position(|r| *r == VariableRole::PredictionError).ok_or_else(|| {
            Error::Roles(format!(
                "dataset with columns {:?} has no prediction_error column; tag one with the error role",
                self.names
            ))
        })
    }

    pub fn covariate_indices(&self) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == VariableRole::Covariate).map(|(i, _)| i).collect()
    }

    /// Append a series. The result is re-validated against the role rules.
    pub fn with_column(&self, name: &str, role: VariableRole, column: &[f64]) -> Result<Self> {
        if column.len() != self.n_times() {
            return Err(Error::Dataset(format!("column {name:?} has {} rows, expected {}", column.len(), self.n_times())));
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        let mut roles = self.roles.clone();
        roles.push(role);
        let mut values = self.values.clone().insert_column(self.n_vars(), 0.0);
        for (t, v) in column.iter().enumerate() {
            values[(t, self.n_vars())] = *v;
        }
        let out = TimeSeriesDataset::new(names, roles, values)?;
        match &self.time_labels {
            Some(l) => out.with_time_labels(l.clone()),
            None => Ok(out),
        }
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_times() {
            return Err(Error::OutOfRange { index: end, valid: format!("0..={} with start < end", self.n_times()) });
        }
        let values = self.values.rows(start, end - start).into_owned();
        let out = TimeSeriesDataset::new(self.names.clone(), self.roles.clone(), values)?;
        match &self.time_labels {
            Some(l) => out.with_time_labels(l[start..end].to_vec()),
            None => Ok(out),
        }
    }

    /// Name → role map, as accepted by [`load_csv`].
    pub fn role_map(&self) -> BTreeMap<String, VariableRole> {
        self.names.iter().cloned().zip(self.roles.iter().copied()).collect()
    }

    /// Write as CSV. A `t` column is emitted first when time labels exist.
    /// Floats use the shortest representation that parses back exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_to(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    fn write_to<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header: Vec<String> = Vec::with_capacity(self.n_vars() + 1);
        if self.time_labels.is_some() {
            header.push("t".into());
        }
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.n_times() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(l) = &self.time_labels {
                rec.push(l[t].clone());
            }
            rec.extend((0..self.n_vars()).map(|p| format!("{}", self.values[(t, p)])));
            w.write_record(&rec)?;
        }
        Ok(())
    }
}

fn check_roles(names: &[String], roles: &[VariableRole]) -> Result<()> {
    let count = |r: VariableRole| roles.iter().filter(|x| **x == r).count();
    let tagged = |r: VariableRole| -> Vec<&str> {
        names.iter().zip(roles).filter(|(_, x)| **x == r).map(|(n, _)| n.as_str()).collect()
    };
    match count(VariableRole::Target) {
        1 => {}
        0 => return Err(Error::Roles("no column tagged as target".into())),
        _ => return Err(Error::Roles(format!("several columns tagged as target: {:?}", tagged(VariableRole::Target)))),
    }
    if count(VariableRole::PredictionError) > 1 {
        return Err(Error::Roles(format!(
            "several columns tagged as prediction_error: {:?}",
            tagged(VariableRole::PredictionError)
        )));
    }
    if count(VariableRole::Covariate) == 0 {
        return Err(Error::Roles("at least one covariate is required".into()));
    }
    Ok(())
}

/// Read a comma-separated file whose first row names the columns. A first
/// column named `t` is kept as time labels and otherwise ignored. Every
/// other column must appear in `role_map` and vice versa.
pub fn load_csv(path: impl AsRef<Path>, role_map: &BTreeMap<String, VariableRole>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, role_map)
}

pub fn read_csv<R: std::io::Read>(reader: R, role_map: &BTreeMap<String, VariableRole>) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_time = header.first().map(|h| h == "t").unwrap_or(false);
    let names: Vec<String> = header.iter().skip(usize::from(has_time)).cloned().collect();

    for key in role_map.keys() {
        if !names.contains(key) {
            return Err(Error::Roles(format!("role given for unknown column {key:?}; columns are {names:?}")));
        }
    }
    let roles = names
        .iter()
        .map(|n| role_map.get(n).copied().ok_or_else(|| Error::Roles(format!("no role given for column {n:?}"))))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut labels = Vec::new();
    let mut n_rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Dataset(format!("row {row} has {} fields, header has {}", rec.len(), header.len())));
        }
        if has_time {
            labels.push(rec[0].to_string());
        }
        for (c, name) in names.iter().enumerate() {
            let raw = &rec[c + usize::from(has_time)];
            let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::BadCell {
                row,
                column: name.clone(),
                value: raw.to_string(),
            })?;
            cells.push(v);
        }
        n_rows += 1;
    }
    let values = DMatrix::from_row_slice(n_rows, names.len(), &cells);
    let ds = TimeSeriesDataset::new(names, roles, values)?;
    if has_time {
        ds.with_time_labels(labels)
    } else {
        Ok(ds)
    }
}

/// The unrolled, non-time-series view of a dataset. Row `k` corresponds to
/// original time `k + tau_max`; column `lag * V + p` holds `X[t - lag, p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedDataset {
    var_names: Vec<String>,
    roles: Vec<VariableRole>,
    players: Vec<Player>,
    rows: DMatrix<f64>,
    tau_max: usize,
}

impl LaggedDataset {
    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn roles(&self) -> &[VariableRole] {
        &self.roles
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn player_index(&self, var: usize, lag: usize) -> usize {
        lag * self.n_vars() + var
    }

    pub fn find_player(&self, name: &str, lag: usize) -> Option<usize> {
        let v = self.var_names.iter().position(|n| n == name)?;
        (lag <= self.tau_max).then(|| self.player_index(v, lag))
    }

    /// Variable index of a player.
    pub fn var_of(&self, player: usize) -> usize {
        player % self.n_vars()
    }

    pub fn column(&self, player: usize) -> Vec<f64> {
        self.rows.column(player).iter().copied().collect()
    }

    /// First original time index covered by the table.
    pub fn first_time(&self) -> usize {
        self.tau_max
    }

    pub fn error_player(&self) -> Result<usize> {
        self.roles
            .iter()
            .position(|r| *r == VariableRole::PredictionError)
            .ok_or_else(|| Error::Roles(format!("no prediction_error column among {:?}", self.var_names)))
    }

    pub fn covariate_vars(&self) -> Vec<usize> {
        self.roles.iter().enumerate().filter(|(_, r)| **r == VariableRole::Covariate).map(|(i, _)| i).collect()
    }
}

pub fn lagged_players(var_names: &[String], tau_max: usize) -> Vec<Player> {
    (0..=tau_max).flat_map(|lag| var_names.iter().map(move |n| Player::new(n.clone(), lag))).collect()
}

/// Unroll `ds` into `T - tau_max` rows of `V * (tau_max + 1)` players.
pub fn to_lagged(ds: &TimeSeriesDataset, tau_max: usize) -> Result<LaggedDataset> {
    let (t_len, v) = (ds.n_times(), ds.n_vars());
    if tau_max >= t_len {
        return Err(Error::OutOfRange { index: tau_max, valid: format!("tau_max < T = {t_len}") });
    }
    let n_rows = t_len - tau_max;
    let rows = DMatrix::from_fn(n_rows, v * (tau_max + 1), |k, c| {
        let (lag, p) = (c / v, c % v);
        ds.values()[(k + tau_max - lag, p)]
    });
    Ok(LaggedDataset {
        var_names: ds.names().to_vec(),
        roles: ds.roles().to_vec(),
        players: lagged_players(ds.names(), tau_max),
        rows,
        tau_max,
    })
}

/// One lagged row, optionally carrying its extracted noise vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSample {
    pub time_index: usize,
    pub values: Vec<f64>,
    pub noises: Option<Vec<f64>>,
}

impl TargetSample {
    pub fn new(time_index: usize, values: Vec<f64>) -> Self {
        TargetSample { time_index, values, noises: None }
    }
}

/// The lagged row at original time `t_star`.
pub fn target_row(lds: &LaggedDataset, t_star: usize) -> Result<TargetSample> {
    let last = lds.first_time() + lds.n_rows() - 1;
    if t_star < lds.first_time() || t_star > last {
        return Err(Error::OutOfRange { index: t_star, valid: format!("{}..={last}", lds.first_time()) });
    }
    let k = t_star - lds.first_time();
    Ok(TargetSample::new(t_star, lds.rows.row(k).iter().copied().collect()))
}
