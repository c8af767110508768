use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{DataError, Dataset};

/// Calories-per-kg value to one of five classes:
/// `[0, 0.5)`, `[0.5, 1)`, `[1, 2)`, `[2, 3)`, `[3, inf)`.
pub fn bin_calories(v: f64) -> Result<usize, DataError> {
    if !v.is_finite() || v < 0.0 {
        return Err(DataError::BadCalorie(v));
    }
    Ok(match v {
        v if v < 0.5 => 0,
        v if v < 1.0 => 1,
        v if v < 2.0 => 2,
        v if v < 3.0 => 3,
        _ => 4,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureColumns {
    Named(Vec<String>),
    /// Every column except the label and the excluded ones, in file order.
    AllExcept(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelMode {
    /// Numeric calorie value binned into 5 classes.
    CalorieBin,
    /// Class names (matched case-insensitively) or 1-based class numbers.
    DirectClass { names: Vec<String> },
}

impl LabelMode {
    pub fn class_count(&self) -> usize {
        match self {
            LabelMode::CalorieBin => 5,
            LabelMode::DirectClass { names } => names.len(),
        }
    }

    fn map(&self, raw: &str, row: usize) -> Result<usize, DataError> {
        let unknown = || DataError::UnknownLabel { row, value: raw.to_string() };
        match self {
            LabelMode::CalorieBin => {
                let v: f64 = raw.trim().parse().map_err(|_| unknown())?;
                bin_calories(v).map_err(|_| unknown())
            }
            LabelMode::DirectClass { names } => {
                let raw = raw.trim();
                if let Some(i) = names.iter().position(|n| n.eq_ignore_ascii_case(raw)) {
                    return Ok(i);
                }
                match raw.parse::<usize>() {
                    Ok(k) if (1..=names.len()).contains(&k) => Ok(k - 1),
                    _ => Err(unknown()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub features: FeatureColumns,
    pub label: String,
    pub label_mode: LabelMode,
    /// Apply min-max scaling fitted on the training split.
    pub normalize: bool,
}

impl CsvSchema {
    /// Named schemas for the two supported dataset shapes.
    ///
    /// * `calorie`: per-weight calorie columns, label `Calories per kg`
    ///   binned into 5 classes.
    /// * `harsense`: every numeric sensor column, label `activity` with the
    ///   six activities Running, Walking, Sitting, Standing, Downstairs,
    ///   Upstairs (names or 1..6).
    pub fn preset(name: &str) -> Option<CsvSchema> {
        match name {
            "calorie" => Some(CsvSchema {
                features: FeatureColumns::Named(
                    ["130 lb", "155 lb", "180 lb", "205 lb"].map(String::from).to_vec(),
                ),
                label: "Calories per kg".into(),
                label_mode: LabelMode::CalorieBin,
                normalize: true,
            }),
            "harsense" => Some(CsvSchema {
                features: FeatureColumns::AllExcept(Vec::new()),
                label: "activity".into(),
                label_mode: LabelMode::DirectClass {
                    names: ["Running", "Walking", "Sitting", "Standing", "Downstairs", "Upstairs"]
                        .map(String::from)
                        .to_vec(),
                },
                normalize: true,
            }),
            _ => None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let file = File::open(path.as_ref()).map_err(|e| DataError::Io(e.to_string()))?;
    load_csv_reader(file, schema)
}

/// Parses comma-separated text with a header row. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv { row: 0, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.into()))
    };
    let label_idx = find(&schema.label)?;
    let feature_idx: Vec<usize> = match &schema.features {
        FeatureColumns::Named(names) => names.iter().map(|n| find(n)).collect::<Result<_, _>>()?,
        FeatureColumns::AllExcept(excluded) => {
            for e in excluded {
                find(e)?;
            }
            (0..header.len())
                .filter(|&i| i != label_idx && !excluded.contains(&header[i]))
                .collect()
        }
    };
    if feature_idx.is_empty() {
        return Err(DataError::InvalidArgument("schema selects no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Csv { row, message: e.to_string() })?;
        for &c in &feature_idx {
            let raw = record.get(c).unwrap_or("");
            let v: f64 = raw.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                DataError::Unparsable { row, column: header[c].clone(), value: raw.to_string() }
            })?;
            features.push(v);
        }
        labels.push(schema.label_mode.map(record.get(label_idx).unwrap_or(""), row)?);
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new(features, feature_idx.len(), labels, schema.label_mode.class_count())
}

/// Per-feature min-max scaling to `[0, 1]`. A feature whose training range
/// is empty maps to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(train: &Dataset) -> Self {
        let d = train.dim();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for i in 0..train.len() {
            for (j, &v) in train.row(i).iter().enumerate() {
                mins[j] = mins[j].min(v);
                maxs[j] = maxs[j].max(v);
            }
        }
        Self { mins, maxs }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        out.map_features(|j, v| {
            let range = self.maxs[j] - self.mins[j];
            if range > 0.0 && range.is_finite() {
                (v - self.mins[j]) / range
            } else {
                0.0
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calorie_bins_with_upper_boundaries() {
        assert_eq!(bin_calories(0.4).unwrap(), 0);
        assert_eq!(bin_calories(0.5).unwrap(), 1);
        assert_eq!(bin_calories(0.99).unwrap(), 1);
        assert_eq!(bin_calories(1.0).unwrap(), 2);
        assert_eq!(bin_calories(2.0).unwrap(), 3);
        assert_eq!(bin_calories(3.0).unwrap(), 4);
        assert_eq!(bin_calories(0.0).unwrap(), 0);
        assert!(bin_calories(-0.1).is_err());
        assert!(bin_calories(f64::NAN).is_err());
    }

    fn calorie_schema() -> CsvSchema {
        CsvSchema::preset("calorie").unwrap()
    }

    #[test]
    fn toy_csv_parses_exactly() {
        let text = "\"Activity, Exercise or Sport (1 hour)\",130 lb,155 lb,180 lb,205 lb,Calories per kg\n\
                    Cycling,472,563,654,745,1.04\n\
                    Running,590,704,817,931,1.3\n\
                    Yoga,177,211,245,279,0.39\n";
        let ds = load_csv_reader(text.as_bytes(), &calorie_schema()).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(
            ds.features(),
            &[472., 563., 654., 745., 590., 704., 817., 931., 177., 211., 245., 279.]
        );
        assert_eq!(ds.labels(), &[2, 2, 0]);
        assert_eq!(ds.class_count(), 5);
    }

    #[test]
    fn missing_column_is_named() {
        let text = "130 lb,155 lb,180 lb,Calories per kg\n1,2,3,0.3\n";
        assert_eq!(
            load_csv_reader(text.as_bytes(), &calorie_schema()),
            Err(DataError::MissingColumn("205 lb".into()))
        );
    }

    #[test]
    fn bad_number_reports_row() {
        let text = "130 lb,155 lb,180 lb,205 lb,Calories per kg\n1,2,3,4,0.3\n1,x,3,4,0.3\n";
        assert_eq!(
            load_csv_reader(text.as_bytes(), &calorie_schema()),
            Err(DataError::Unparsable { row: 2, column: "155 lb".into(), value: "x".into() })
        );
    }

    #[test]
    fn empty_file_rejected() {
        let text = "130 lb,155 lb,180 lb,205 lb,Calories per kg\n";
        assert_eq!(load_csv_reader(text.as_bytes(), &calorie_schema()), Err(DataError::Empty));
    }

    #[test]
    fn har_labels_by_name_or_number() {
        let schema = CsvSchema::preset("harsense").unwrap();
        let text = "ax,ay,activity\n0.1,0.2,Walking\n0.3,0.4,6\n0.5,0.6,sitting\n";
        let ds = load_csv_reader(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.labels(), &[1, 5, 2]);
        assert_eq!(ds.class_count(), 6);
        let bad = "ax,ay,activity\n0.1,0.2,Jumping\n";
        assert_eq!(
            load_csv_reader(bad.as_bytes(), &schema),
            Err(DataError::UnknownLabel { row: 1, value: "Jumping".into() })
        );
    }

    #[test]
    fn min_max_uses_training_range_and_degenerate_rule() {
        let train = Dataset::new(vec![0.0, 5.0, 10.0, 5.0], 2, vec![0, 1], 2).unwrap();
        let scaler = MinMaxScaler::fit(&train);
        let t = scaler.transform(&train);
        assert_eq!(t.features(), &[0.0, 0.0, 1.0, 0.0]);
        let test = Dataset::new(vec![5.0, 7.0], 2, vec![0], 2).unwrap();
        assert_eq!(scaler.transform(&test).features(), &[0.5, 0.0]);
    }
}
