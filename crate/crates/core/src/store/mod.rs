//! Typed, log-structured table store.
//!
//! Every write is validated against its table schema and appended to an
//! in-memory journal; the run writer drains the journal into one JSONL file
//! per table. Keyed tables are journaled as upserts, so replaying a file in
//! order rebuilds the final state.

pub mod codec;
pub mod schema;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde_json::{Map, Value as Json};

pub use schema::{schemas, Column, ColumnType, TableMode, TableSchema};

use crate::clock::Timestamp;
use crate::decision::ProfileKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    IntArray(Vec<i64>),
    FloatArray(Vec<f64>),
    TextArray(Vec<String>),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    /// Floats, and ints widened to float.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match self {
            Value::FloatArray(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64_slice(&self) -> Option<&[i64]> {
        match self {
            Value::IntArray(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_text_slice(&self) -> Option<&[String]> {
        match self {
            Value::TextArray(v) => Some(v),
            _ => None,
        }
    }

    fn conforms(&self, ty: ColumnType) -> bool {
        match (self, ty) {
            (Value::Int(_), ColumnType::Int) => true,
            (Value::Float(v), ColumnType::Float) => v.is_finite(),
            (Value::Text(_), ColumnType::Text) => true,
            (Value::Text(s), ColumnType::Timestamp) => Timestamp::parse(s).is_some(),
            (Value::Bool(_), ColumnType::Bool) => true,
            (Value::IntArray(_), ColumnType::IntArray) => true,
            (Value::FloatArray(v), ColumnType::FloatArray) => v.iter().all(|x| x.is_finite()),
            (Value::TextArray(_), ColumnType::TextArray) => true,
            _ => false,
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Null => Json::Null,
            Value::Int(v) => Json::from(*v),
            Value::Float(v) => Json::from(*v),
            Value::Text(s) => Json::from(s.as_str()),
            Value::Bool(b) => Json::from(*b),
            Value::IntArray(v) => Json::from(v.clone()),
            Value::FloatArray(v) => Json::from(v.clone()),
            Value::TextArray(v) => Json::from(v.clone()),
        }
    }

    /// Reads a JSON value as the given column type. Integral JSON numbers
    /// are accepted in float columns.
    pub fn from_json(json: &Json, ty: ColumnType) -> Option<Value> {
        if json.is_null() {
            return Some(Value::Null);
        }
        let floats = |v: &Vec<Json>| v.iter().map(Json::as_f64).collect::<Option<Vec<_>>>();
        Some(match ty {
            ColumnType::Int => Value::Int(json.as_i64()?),
            ColumnType::Float => Value::Float(json.as_f64()?),
            ColumnType::Text | ColumnType::Timestamp => Value::Text(json.as_str()?.to_string()),
            ColumnType::Bool => Value::Bool(json.as_bool()?),
            ColumnType::IntArray => {
                Value::IntArray(json.as_array()?.iter().map(Json::as_i64).collect::<Option<Vec<_>>>()?)
            }
            ColumnType::FloatArray => Value::FloatArray(floats(json.as_array()?)?),
            ColumnType::TextArray => Value::TextArray(
                json.as_array()?
                    .iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()?,
            ),
        })
    }
}

macro_rules! value_from {
    ($($t:ty => $variant:ident as $conv:ty),* $(,)?) => {
        $(impl From<$t> for Value {
            fn from(v: $t) -> Self {
                Value::$variant(v as $conv)
            }
        })*
    };
}

value_from!(i64 => Int as i64, i32 => Int as i64, u32 => Int as i64, u64 => Int as i64, u8 => Int as i64, usize => Int as i64, f64 => Float as f64);

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

impl From<&String> for Value {
    fn from(v: &String) -> Self {
        Value::Text(v.clone())
    }
}

impl From<Timestamp> for Value {
    fn from(v: Timestamp) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<Vec<f64>> for Value {
    fn from(v: Vec<f64>) -> Self {
        Value::FloatArray(v)
    }
}

impl From<Vec<i64>> for Value {
    fn from(v: Vec<i64>) -> Self {
        Value::IntArray(v)
    }
}

impl From<Vec<String>> for Value {
    fn from(v: Vec<String>) -> Self {
        Value::TextArray(v)
    }
}

impl<T: Into<Value>> From<Option<T>> for Value {
    fn from(v: Option<T>) -> Self {
        v.map_or(Value::Null, Into::into)
    }
}

/// One stored row; values are in schema column order.
#[derive(Debug, Clone, PartialEq)]
pub struct Row(pub Vec<Value>);

/// Assembles a row by column name.
#[derive(Debug, Clone)]
pub struct RowBuilder {
    schema: &'static TableSchema,
    values: Vec<Option<Value>>,
    unknown: Vec<String>,
}

impl RowBuilder {
    pub fn new(schema: &'static TableSchema) -> Self {
        Self {
            schema,
            values: vec![None; schema.columns.len()],
            unknown: Vec::new(),
        }
    }

    pub fn set(mut self, column: &str, value: impl Into<Value>) -> Self {
        self.put(column, value);
        self
    }

    pub fn put(&mut self, column: &str, value: impl Into<Value>) {
        match self.schema.column_index(column) {
            Some(i) => self.values[i] = Some(value.into()),
            None => self.unknown.push(column.to_string()),
        }
    }

    pub fn table(&self) -> &'static str {
        self.schema.name
    }

    /// Validates types and nullability; unset nullable columns become null.
    pub fn build(self) -> Result<Row> {
        let violation = |reason: String| Error::SchemaViolation {
            table: self.schema.name.to_string(),
            reason,
        };
        if let Some(col) = self.unknown.first() {
            return Err(violation(format!("unknown column `{col}`")));
        }
        let mut out = Vec::with_capacity(self.values.len());
        for (col, value) in self.schema.columns.iter().zip(self.values.iter()) {
            let value = match value {
                None | Some(Value::Null) if col.nullable => Value::Null,
                None | Some(Value::Null) => return Err(violation(format!("missing value for `{}`", col.name))),
                Some(v) if v.conforms(col.ty) => v.clone(),
                Some(v) => return Err(violation(format!("`{}` expects {:?}, got {v:?}", col.name, col.ty))),
            };
            out.push(value);
        }
        Ok(Row(out))
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub schema: &'static TableSchema,
    rows: Vec<Row>,
    keys: HashMap<String, usize>,
}

impl Table {
    fn new(schema: &'static TableSchema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
            keys: HashMap::new(),
        }
    }

    fn key_of(&self, row: &Row) -> Option<String> {
        match &self.schema.mode {
            TableMode::Keyed(cols) => {
                let parts: Vec<String> = cols
                    .iter()
                    .map(|c| {
                        let i = self.schema.column_index(c).expect("key column in schema");
                        format!("{:?}", row.0[i])
                    })
                    .collect();
                Some(parts.join("\u{1f}"))
            }
            _ => None,
        }
    }

    /// Stores a validated row and returns its position.
    fn put(&mut self, row: Row) -> usize {
        match &self.schema.mode {
            TableMode::AppendOnly => {
                self.rows.push(row);
                self.rows.len() - 1
            }
            TableMode::Singleton => {
                self.rows.clear();
                self.rows.push(row);
                0
            }
            TableMode::Keyed(_) => {
                let key = self.key_of(&row).expect("keyed table");
                match self.keys.get(&key) {
                    Some(&i) => {
                        self.rows[i] = row;
                        i
                    }
                    None => {
                        self.rows.push(row);
                        self.keys.insert(key, self.rows.len() - 1);
                        self.rows.len() - 1
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = RowView<'_>> {
        self.rows.iter().enumerate().map(move |(index, row)| RowView {
            schema: self.schema,
            index,
            row,
        })
    }

    pub fn row(&self, index: usize) -> Option<RowView<'_>> {
        self.rows.get(index).map(|row| RowView {
            schema: self.schema,
            index,
            row,
        })
    }

    pub fn row_json(&self, index: usize) -> Option<Json> {
        self.row(index).map(|r| r.to_json())
    }

    /// Replaces one row in place without any validation. Only meant for
    /// building corrupted fixtures.
    pub fn overwrite_unchecked(&mut self, index: usize, column: &str, value: Value) -> Result<()> {
        let col = self
            .schema
            .column_index(column)
            .ok_or_else(|| Error::NotFound(format!("column `{column}`")))?;
        let row = self.rows.get_mut(index).ok_or_else(|| Error::NotFound(format!("row {index}")))?;
        row.0[col] = value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub schema: &'static TableSchema,
    pub index: usize,
    row: &'a Row,
}

impl<'a> RowView<'a> {
    pub fn value(&self, column: &str) -> &'a Value {
        static NULL: Value = Value::Null;
        self.schema.column_index(column).map_or(&NULL, |i| &self.row.0[i])
    }

    pub fn i64(&self, column: &str) -> Option<i64> {
        self.value(column).as_i64()
    }

    pub fn f64(&self, column: &str) -> Option<f64> {
        self.value(column).as_f64()
    }

    pub fn text(&self, column: &str) -> Option<&'a str> {
        self.value(column).as_str()
    }

    pub fn bool(&self, column: &str) -> Option<bool> {
        self.value(column).as_bool()
    }

    pub fn floats(&self, column: &str) -> Option<&'a [f64]> {
        self.value(column).as_f64_slice()
    }

    pub fn to_json(&self) -> Json {
        let mut map = Map::new();
        for (col, v) in self.schema.columns.iter().zip(&self.row.0) {
            map.insert(col.name.clone(), v.to_json());
        }
        Json::Object(map)
    }
}

/// Pending journal line for one table file.
#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry {
    pub file: &'static str,
    pub line: String,
}

#[derive(Debug, Clone)]
pub struct Store {
    profile: ProfileKind,
    tables: BTreeMap<&'static str, Table>,
    journal: Vec<JournalEntry>,
}

pub type SnapshotId = u64;

/// Saved store states; kept outside `Store` so snapshots do not nest.
#[derive(Debug, Default)]
pub struct Snapshots {
    saved: BTreeMap<SnapshotId, Store>,
    next: SnapshotId,
}

impl Snapshots {
    pub fn snapshot(&mut self, store: &Store) -> SnapshotId {
        let id = self.next;
        self.next += 1;
        let mut copy = store.clone();
        copy.journal.clear();
        self.saved.insert(id, copy);
        id
    }

    pub fn restore(&self, id: SnapshotId) -> Result<Store> {
        self.saved
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("snapshot {id}")))
    }
}

impl Store {
    pub fn new(profile: ProfileKind) -> Self {
        let tables = schemas(profile).iter().map(|s| (s.name, Table::new(s))).collect();
        Self {
            profile,
            tables,
            journal: Vec::new(),
        }
    }

    pub fn profile(&self) -> ProfileKind {
        self.profile
    }

    pub fn schema(&self, table: &str) -> Result<&'static TableSchema> {
        Ok(self.table(table)?.schema)
    }

    pub fn row(&self, table: &str) -> Result<RowBuilder> {
        Ok(RowBuilder::new(self.schema(table)?))
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::NotFound(format!("table `{name}` in the {} store", self.profile)))
    }

    pub fn table_mut(&mut self, name: &str) -> Result<&mut Table> {
        let profile = self.profile;
        self.tables
            .get_mut(name)
            .ok_or_else(|| Error::NotFound(format!("table `{name}` in the {profile} store")))
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    /// Validates and stores a row; returns its position in the table.
    pub fn append(&mut self, builder: RowBuilder) -> Result<usize> {
        let name = builder.table();
        let row = builder.build()?;
        let table = self.table_mut(name)?;
        let file = table.schema.file;
        let idx = table.put(row);
        let line = serde_json::to_string(&table.row(idx).expect("just stored").to_json())?;
        self.journal.push(JournalEntry { file, line });
        Ok(idx)
    }

    pub fn query<'a>(&'a self, table: &str, mut pred: impl FnMut(&RowView<'a>) -> bool) -> Result<Vec<RowView<'a>>> {
        Ok(self.table(table)?.rows().filter(|r| pred(r)).collect())
    }

    pub fn count(&self, table: &str) -> usize {
        self.tables.get(table).map_or(0, Table::len)
    }

    pub fn drain_journal(&mut self) -> Vec<JournalEntry> {
        std::mem::take(&mut self.journal)
    }

    /// Appends the pending journal to `<dir>/<file>.jsonl`; returns the
    /// number of lines written per file.
    pub fn flush_journal(&mut self, dir: &Path) -> Result<BTreeMap<&'static str, usize>> {
        let entries = self.drain_journal();
        let mut written = BTreeMap::new();
        if entries.is_empty() {
            return Ok(written);
        }
        fs::create_dir_all(dir)?;
        let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &entries {
            grouped.entry(e.file).or_default().push(&e.line);
        }
        for (file, lines) in grouped {
            written.insert(file, lines.len());
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(format!("{file}.jsonl")))?;
            let mut buf = String::new();
            for line in lines {
                buf.push_str(line);
                buf.push('\n');
            }
            f.write_all(buf.as_bytes())?;
        }
        Ok(written)
    }

    /// Rebuilds a store from table files written by [`Store::flush_journal`].
    /// Missing files are treated as empty tables.
    pub fn load_dir(profile: ProfileKind, dir: &Path) -> Result<Self> {
        Self::load_prefix(profile, dir, None)
    }

    /// Like [`Store::load_dir`], replaying at most `lines[file]` journal
    /// lines per table file. Files absent from `lines` load nothing.
    pub fn load_prefix(profile: ProfileKind, dir: &Path, lines: Option<&BTreeMap<String, usize>>) -> Result<Self> {
        let mut store = Store::new(profile);
        for schema in schemas(profile) {
            let path = dir.join(format!("{}.jsonl", schema.file));
            let limit = match lines {
                Some(l) => l.get(schema.file).copied().unwrap_or(0),
                None => usize::MAX,
            };
            if !path.exists() || limit == 0 {
                continue;
            }
            let reader = BufReader::new(fs::File::open(&path)?);
            for (n, line) in reader.lines().enumerate().take(limit) {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let json: Json = serde_json::from_str(&line)?;
                let obj = json.as_object().ok_or_else(|| Error::SchemaViolation {
                    table: schema.name.to_string(),
                    reason: format!("line {} is not an object", n + 1),
                })?;
                let mut builder = RowBuilder::new(schema);
                for col in &schema.columns {
                    let raw = obj.get(&col.name).unwrap_or(&Json::Null);
                    let value = Value::from_json(raw, col.ty).ok_or_else(|| Error::SchemaViolation {
                        table: schema.name.to_string(),
                        reason: format!("line {}: bad value for `{}`", n + 1, col.name),
                    })?;
                    builder.put(&col.name, value);
                }
                store.append(builder)?;
            }
        }
        store.journal.clear();
        Ok(store)
    }
}
