//! Tabular datasets: schema, CSV ingestion, preprocessing and splits.

mod preprocess;
mod splits;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use preprocess::{fit_preprocess, FeatureTransform, PreprocessOptions, PreprocessState, StatsMode};
pub use splits::{make_splits, preset, Preset, SplitSpec, Splits, TestSplit, PRESETS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnType {
    Numeric,
    Categorical,
    Label,
    /// Present in the file but not used.
    Ignore,
}

/// One schema entry. `repeat` expands to `name_0 .. name_{n-1}`, which keeps
/// wide image-like schemas short.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: ColumnType,
    /// Allowed values for categorical or label columns; when absent the
    /// vocabulary is the sorted set of values seen in the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    /// Whether the CSV starts with a header line (default true).
    #[serde(default = "yes")]
    pub header: bool,
}

fn yes() -> bool {
    true
}

impl Schema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Schema =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }

    /// Columns with `repeat` expanded.
    pub fn expanded(&self) -> Vec<ColumnSpec> {
        let mut out = Vec::new();
        for c in &self.columns {
            match c.repeat {
                Some(n) => out.extend((0..n).map(|i| ColumnSpec {
                    name: format!("{}_{i}", c.name),
                    repeat: None,
                    ..c.clone()
                })),
                None => out.push(c.clone()),
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.expanded();
        let labels = cols.iter().filter(|c| c.kind == ColumnType::Label).count();
        if labels > 1 {
            return Err(Error::Config(format!(
                "schema {} declares {labels} label columns",
                self.name
            )));
        }
        if !cols
            .iter()
            .any(|c| matches!(c.kind, ColumnType::Numeric | ColumnType::Categorical))
        {
            return Err(Error::Config(format!("schema {} has no feature columns", self.name)));
        }
        let mut seen = BTreeSet::new();
        for c in &cols {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate column name {}", c.name)));
            }
            if c.categories.is_some() && c.kind == ColumnType::Numeric {
                return Err(Error::Config(format!("numeric column {} lists categories", c.name)));
            }
            if c.repeat == Some(0) {
                return Err(Error::Config(format!("column {} repeats 0 times", c.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn cardinality(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { categories } => Some(categories.len()),
        }
    }
}

/// Raw features (categoricals as category indices) with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    pub features: Vec<Feature>,
    pub x: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
    pub classes: Vec<String>,
}

impl TabularDataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<Feature>,
        x: Tensor<f64>,
        labels: Option<Vec<usize>>,
        classes: Vec<String>,
    ) -> Result<Self> {
        let d = Self {
            name: name.into(),
            features,
            x,
            labels,
            classes,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.x.shape().len() != 2 || self.x.cols() != self.features.len() {
            return Err(Error::Shape(format!(
                "feature matrix {:?} does not match {} features",
                self.x.shape(),
                self.features.len()
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.x.rows() {
                return Err(Error::Data(format!("{} labels for {} rows", l.len(), self.x.rows())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= self.classes.len()) {
                return Err(Error::Data(format!(
                    "label {bad} outside {} classes",
                    self.classes.len()
                )));
            }
        }
        for (j, f) in self.features.iter().enumerate() {
            if let Some(k) = f.cardinality() {
                for r in 0..self.x.rows() {
                    let v = self.x.at(r, j);
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= k {
                        return Err(Error::Data(format!(
                            "row {r}: {} index {v} outside vocabulary of {k}",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("dataset {} has no labels", self.name)))
    }

    /// Schema that reproduces this dataset when written with [`write_csv`].
    pub fn schema(&self) -> Schema {
        let mut columns: Vec<ColumnSpec> = self
            .features
            .iter()
            .map(|f| ColumnSpec {
                name: f.name.clone(),
                kind: match f.kind {
                    FeatureKind::Numeric => ColumnType::Numeric,
                    FeatureKind::Categorical { .. } => ColumnType::Categorical,
                },
                categories: match &f.kind {
                    FeatureKind::Numeric => None,
                    FeatureKind::Categorical { categories } => Some(categories.clone()),
                },
                repeat: None,
            })
            .collect();
        if self.labels.is_some() {
            columns.push(ColumnSpec {
                name: "label".into(),
                kind: ColumnType::Label,
                categories: Some(self.classes.clone()),
                repeat: None,
            });
        }
        Schema {
            name: self.name.clone(),
            columns,
            header: true,
        }
    }
}

/// Reads a CSV described by `schema`. Numeric cells must parse as finite
/// numbers; there is no imputation, so empty cells are errors.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema, origin: &str) -> Result<TabularDataset> {
    schema.validate()?;
    let cols = schema.expanded();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.header)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let label_col = cols.iter().position(|c| c.kind == ColumnType::Label);
    let feature_cols: Vec<usize> = (0..cols.len())
        .filter(|&i| matches!(cols[i].kind, ColumnType::Numeric | ColumnType::Categorical))
        .collect();
    // categorical cells are kept as strings until the vocabulary is known
    let mut numeric: Vec<f64> = Vec::new();
    let mut strings: Vec<Vec<String>> = vec![Vec::new(); cols.len()];
    let mut rows = 0usize;
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Data(format!("{origin}:{line}: {e}"))
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(rows as u64 + 1, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != cols.len() {
            return Err(Error::Data(format!(
                "{origin}:{line}: schema {} expects {} fields, found {}",
                schema.name,
                cols.len(),
                record.len()
            )));
        }
        for &i in &feature_cols {
            let cell = &record[i];
            match cols[i].kind {
                ColumnType::Numeric => {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Data(format!(
                            "{origin}:{line}: column {} value {cell:?} is not a number",
                            cols[i].name
                        ))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data(format!(
                            "{origin}:{line}: column {} is not finite",
                            cols[i].name
                        )));
                    }
                    numeric.push(v);
                }
                _ => {
                    numeric.push(0.0);
                    strings[i].push(cell.to_string());
                }
            }
        }
        if let Some(l) = label_col {
            strings[l].push(record[l].to_string());
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{origin}: dataset has no rows")));
    }

    let vocab = |i: usize| -> Result<(Vec<String>, HashMap<String, usize>)> {
        let cats = match &cols[i].categories {
            Some(c) => c.clone(),
            None => strings[i]
                .iter()
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        };
        let index: HashMap<String, usize> = cats.iter().enumerate().map(|(k, c)| (c.clone(), k)).collect();
        if index.len() != cats.len() {
            return Err(Error::Config(format!("column {} lists a category twice", cols[i].name)));
        }
        Ok((cats, index))
    };
    let lookup = |i: usize, index: &HashMap<String, usize>, r: usize| -> Result<usize> {
        let v = &strings[i][r];
        index.get(v).copied().ok_or_else(|| {
            let line = r + 1 + usize::from(schema.header);
            Error::Data(format!(
                "{origin}:{line}: column {} has unknown category {v:?}",
                cols[i].name
            ))
        })
    };

    let f = feature_cols.len();
    let mut features = Vec::with_capacity(f);
    for (j, &i) in feature_cols.iter().enumerate() {
        match cols[i].kind {
            ColumnType::Numeric => features.push(Feature {
                name: cols[i].name.clone(),
                kind: FeatureKind::Numeric,
            }),
            _ => {
                let (cats, index) = vocab(i)?;
                for r in 0..rows {
                    numeric[r * f + j] = lookup(i, &index, r)? as f64;
                }
                features.push(Feature {
                    name: cols[i].name.clone(),
                    kind: FeatureKind::Categorical { categories: cats },
                });
            }
        }
    }
    let (labels, classes) = match label_col {
        Some(l) => {
            let (cats, index) = vocab(l)?;
            let labels = (0..rows).map(|r| lookup(l, &index, r)).collect::<Result<Vec<_>>>()?;
            (Some(labels), cats)
        }
        None => (None, Vec::new()),
    };
    TabularDataset::new(
        schema.name.clone(),
        features,
        Tensor::new(vec![rows, f], numeric)?,
        labels,
        classes,
    )
}

/// Writes a dataset as CSV matching [`TabularDataset::schema`]. Numbers use
/// the shortest representation that parses back to the same bits.
pub fn write_csv(path: impl AsRef<Path>, data: &TabularDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut header: Vec<String> = data.features.iter().map(|f| f.name.clone()).collect();
    if data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for r in 0..data.len() {
        let mut rec: Vec<String> = data
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match &f.kind {
                FeatureKind::Numeric => format!("{:?}", data.x.at(r, j)),
                FeatureKind::Categorical { categories } => categories[data.x.at(r, j) as usize].clone(),
            })
            .collect();
        if let Some(l) = &data.labels {
            rec.push(data.classes[l[r]].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads `name.csv` and `name.schema.json` from a data directory.
pub fn load_named(dir: impl AsRef<Path>, name: &str) -> Result<TabularDataset> {
    let dir = dir.as_ref();
    let schema = Schema::load(dir.join(format!("{name}.schema.json")))?;
    load_csv(dir.join(format!("{name}.csv")), &schema)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Schema {
        serde_json::from_str(
            r#"{"name":"toy","columns":[
                {"name":"a","type":"numeric"},
                {"name":"b","type":"numeric"},
                {"name":"color","type":"categorical","categories":["red","green","blue"]},
                {"name":"y","type":"label"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn loads_small_fixture() {
        let csv = "a,b,color,y\n1.5,2,red,no\n-3,0.25,blue,yes\n4,5,green,no\n";
        let d = read_csv(csv.as_bytes(), &schema(), "toy").unwrap();
        assert_eq!(d.x.shape(), &[3, 3]);
        assert_eq!(d.features.iter().filter(|f| f.cardinality().is_none()).count(), 2);
        assert_eq!(d.features[2].cardinality(), Some(3));
        assert_eq!(d.x.row(1), &[-3.0, 0.25, 2.0]);
        assert_eq!(d.classes, vec!["no", "yes"]);
        assert_eq!(d.labels.as_deref(), Some(&[0, 1, 0][..]));
    }

    #[test]
    fn header_only_is_empty_error() {
        let err = read_csv("a,b,color,y\n".as_bytes(), &schema(), "toy").unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }

    #[test]
    fn errors_name_the_line() {
        let missing = "a,b,color,y\n1,2,red,no\n1,,red,no\n";
        let err = read_csv(missing.as_bytes(), &schema(), "toy").unwrap_err();
        assert!(err.to_string().contains("toy:3"), "{err}");

        let unknown = "a,b,color,y\n1,2,red,no\n1,2,purple,no\n";
        let err = read_csv(unknown.as_bytes(), &schema(), "toy").unwrap_err();
        assert!(
            err.to_string().contains("toy:3") && err.to_string().contains("purple"),
            "{err}"
        );

        let short = "a,b,color,y\n1,2,red\n";
        assert!(read_csv(short.as_bytes(), &schema(), "toy").is_err());
    }

    #[test]
    fn repeat_expands_columns() {
        let s: Schema = serde_json::from_str(
            r#"{"name":"img","header":false,"columns":[
                {"name":"label","type":"label"},
                {"name":"px","type":"numeric","repeat":4}]}"#,
        )
        .unwrap();
        let d = read_csv("7,0,1,2,3\n3,4,5,6,7\n".as_bytes(), &s, "img").unwrap();
        assert_eq!(d.x.shape(), &[2, 4]);
        assert_eq!(d.features[3].name, "px_3");
        assert_eq!(d.classes, vec!["3", "7"]);
    }

    #[test]
    fn rejects_bad_schemas() {
        let two_labels: Schema = serde_json::from_str(
            r#"{"name":"t","columns":[{"name":"a","type":"numeric"},
               {"name":"y","type":"label"},{"name":"z","type":"label"}]}"#,
        )
        .unwrap();
        assert!(matches!(two_labels.validate(), Err(Error::Config(_))));
        let unknown_key =
            serde_json::from_str::<Schema>(r#"{"name":"t","columns":[{"name":"a","type":"numeric","bins":3}]}"#);
        assert!(unknown_key.is_err());
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let csv = "a,b,color,y\n0.1,2e-300,red,no\n-3.3333333333333335,0.25,blue,yes\n";
        let d = read_csv(csv.as_bytes(), &schema(), "toy").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &d).unwrap();
        let back = load_csv(&p, &d.schema()).unwrap();
        assert_eq!(back.x, d.x);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.features, d.features);
    }
}
