//! Line-oriented text form of a [`StoreSchema`]: one JSON object per line,
//! tagged by `kind`. Blank lines and lines starting with `#` are skipped.
//!
//! ```text
//! {"kind":"store_schema","format":1,"schema_id":"licensing","schema_version":1}
//! {"kind":"stream_schema","stream_type":"license","rules":[{"rule":"initial","subject":"LicenseCreated"}]}
//! {"kind":"event_schema","stream_type":"license","event_type":"LicenseCreated","version":1,"fields":[...]}
//! {"kind":"cohesion","stream_type":"order","event_type":"PaymentTaken","requires_stream_type":"payment"}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::SchemaError;

use super::{CohesionRule, EventSchema, FieldSpec, OrderingRule, StoreSchema, StreamSchema};

const DOC_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    StoreSchema {
        format: u32,
        schema_id: String,
        schema_version: u32,
    },
    StreamSchema {
        stream_type: String,
        #[serde(default)]
        rules: Vec<OrderingRule>,
    },
    EventSchema {
        stream_type: String,
        event_type: String,
        version: u32,
        #[serde(default, skip_serializing_if = "is_false")]
        strict: bool,
        #[serde(default)]
        fields: Vec<FieldSpec>,
    },
    Cohesion(CohesionRule),
}

fn is_false(b: &bool) -> bool {
    !b
}

pub fn encode(schema: &StoreSchema) -> Vec<u8> {
    let mut lines = vec![Line::StoreSchema {
        format: DOC_FORMAT,
        schema_id: schema.schema_id.clone(),
        schema_version: schema.schema_version,
    }];
    for s in &schema.stream_schemas {
        lines.push(Line::StreamSchema {
            stream_type: s.stream_type.clone(),
            rules: s.rules.clone(),
        });
        for e in &s.event_schemas {
            lines.push(Line::EventSchema {
                stream_type: s.stream_type.clone(),
                event_type: e.event_type.clone(),
                version: e.version,
                strict: e.strict_content,
                fields: e.fields.clone(),
            });
        }
    }
    for c in &schema.cohesion_rules {
        lines.push(Line::Cohesion(c.clone()));
    }
    let mut out = Vec::new();
    for line in &lines {
        serde_json::to_writer(&mut out, line).expect("schema lines serialize");
        out.push(b'\n');
    }
    out
}

pub fn encode_string(schema: &StoreSchema) -> String {
    String::from_utf8(encode(schema)).expect("json is utf-8")
}

/// Parses and validates a schema document.
pub fn parse(text: &str) -> Result<StoreSchema, SchemaError> {
    let mut schema: Option<StoreSchema> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason: String| SchemaError::Parse { line: line_no, reason };
        let line: Line = serde_json::from_str(trimmed).map_err(|e| err(e.to_string()))?;
        match (line, schema.as_mut()) {
            (
                Line::StoreSchema {
                    format,
                    schema_id,
                    schema_version,
                },
                None,
            ) => {
                if format != DOC_FORMAT {
                    return Err(err(format!("unsupported schema format {format}")));
                }
                schema = Some(StoreSchema::new(schema_id, schema_version));
            }
            (Line::StoreSchema { .. }, Some(_)) => return Err(err("second store_schema header".into())),
            (_, None) => return Err(err("document must start with a store_schema header".into())),
            (Line::StreamSchema { stream_type, rules }, Some(s)) => {
                if s.stream_schema(&stream_type).is_some() {
                    return Err(err(format!("stream type {stream_type} declared twice")));
                }
                let mut stream = StreamSchema::new(stream_type);
                stream.rules = rules;
                s.stream_schemas.push(stream);
            }
            (
                Line::EventSchema {
                    stream_type,
                    event_type,
                    version,
                    strict,
                    fields,
                },
                Some(s),
            ) => {
                let Some(stream) = s.stream_schema_mut(&stream_type) else {
                    return Err(err(format!("event schema for undeclared stream type {stream_type}")));
                };
                let mut es = EventSchema::new(event_type, version).strict(strict);
                es.fields = fields;
                stream.event_schemas.push(es);
            }
            (Line::Cohesion(rule), Some(s)) => s.cohesion_rules.push(rule),
        }
    }
    let schema = schema.ok_or(SchemaError::Parse {
        line: 0,
        reason: "empty schema document".into(),
    })?;
    schema.validate()?;
    Ok(schema)
}

pub fn load(path: &std::path::Path) -> Result<StoreSchema, SchemaError> {
    parse(&std::fs::read_to_string(path)?)
}
