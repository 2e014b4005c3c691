//! Schema learning: induce a JSON schema of entity types from sample chunks,
//! then project it into the section-level (Step 1) and per-section (Step 2)
//! schemas the parsers are learned against.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::ingest::Chunk;
use crate::llm::{strip_code_fence, Gateway, PromptRequest, RetryPolicy, Stage};
use crate::prompts;

/// Property every section and entity carries: the source lines behind it.
pub const INPUT_DATA: &str = "input_data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaLimits {
    pub max_depth: usize,
    pub max_properties: usize,
}

impl Default for SchemaLimits {
    fn default() -> Self {
        SchemaLimits {
            max_depth: 3,
            max_properties: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaDoc {
    pub json_schema: Value,
    pub entity_types: Vec<EntityType>,
}

impl SchemaDoc {
    pub fn from_value(json_schema: Value) -> Self {
        let entity_types = level1_types(&json_schema)
            .map(|props| {
                props
                    .iter()
                    .map(|(name, s)| EntityType {
                        name: name.clone(),
                        description: s
                            .get("description")
                            .and_then(Value::as_str)
                            .unwrap_or_default()
                            .to_string(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        SchemaDoc {
            json_schema,
            entity_types,
        }
    }
}

fn level1_types(schema: &Value) -> Option<&Map<String, Value>> {
    schema.get("properties").and_then(Value::as_object)
}

fn is_object_schema(v: &Value) -> bool {
    let typed = match v.get("type") {
        Some(Value::String(t)) => t == "object",
        Some(Value::Array(ts)) => ts.iter().any(|t| t == "object"),
        _ => false,
    };
    typed || v.get("properties").is_some()
}

fn escape_pointer(s: &str) -> String {
    s.replace('~', "~0").replace('/', "~1")
}

/// Walks nested schemas looking for depth or width violations. The root object
/// is the container of entity types and does not count toward depth.
fn check_limits(v: &Value, path: &str, depth: usize, limits: &SchemaLimits) -> Result<(), String> {
    let Some(obj) = v.as_object() else {
        return Ok(());
    };
    let mut depth = depth;
    if is_object_schema(v) && !path.is_empty() {
        depth += 1;
        if depth > limits.max_depth {
            return Err(format!(
                "object nested {depth} levels deep at {path} (limit {})",
                limits.max_depth
            ));
        }
    }
    if let Some(props) = obj.get("properties").and_then(Value::as_object) {
        if props.len() > limits.max_properties {
            return Err(format!(
                "{} properties at {} (limit {})",
                props.len(),
                if path.is_empty() { "/" } else { path },
                limits.max_properties
            ));
        }
        for (k, sub) in props {
            check_limits(sub, &format!("{path}/properties/{}", escape_pointer(k)), depth, limits)?;
        }
    }
    for key in ["items", "additionalProperties", "not"] {
        if let Some(sub) = obj.get(key) {
            check_limits(sub, &format!("{path}/{key}"), depth, limits)?;
        }
    }
    for key in ["prefixItems", "anyOf", "oneOf", "allOf"] {
        if let Some(list) = obj.get(key).and_then(Value::as_array) {
            for (i, sub) in list.iter().enumerate() {
                check_limits(sub, &format!("{path}/{key}/{i}"), depth, limits)?;
            }
        }
    }
    for key in ["$defs", "definitions"] {
        if let Some(defs) = obj.get(key).and_then(Value::as_object) {
            for (k, sub) in defs {
                check_limits(sub, &format!("{path}/{key}/{}", escape_pointer(k)), 0, limits)?;
            }
        }
    }
    Ok(())
}

/// Meta-schema check (draft 2020-12) followed by the nesting and width limits.
/// The error names the JSON pointer of the first violation.
pub fn validate_schema(doc: &Value, limits: &SchemaLimits) -> Result<(), String> {
    if !doc.is_object() {
        return Err("schema must be a JSON object".into());
    }
    if let Err(e) = jsonschema::draft202012::meta::validate(doc) {
        let at = e.instance_path().as_str();
        return Err(format!(
            "meta-schema violation at {}: {e}",
            if at.is_empty() { "/" } else { at }
        ));
    }
    check_limits(doc, "", 0, limits)
}

/// Parses an LLM answer into a schema and applies every check the pipeline
/// needs before accepting it.
pub fn accept_schema_response(text: &str, limits: &SchemaLimits) -> Result<SchemaDoc, String> {
    let value: Value = serde_json::from_str(strip_code_fence(text))
        .map_err(|e| format!("response is not valid JSON: {e}"))?;
    validate_schema(&value, limits)?;
    let doc = SchemaDoc::from_value(value);
    if doc.entity_types.is_empty() {
        return Err("schema declares no entity types under the root \"properties\"".into());
    }
    Ok(doc)
}

/// Learns a schema from the samples: one initial prompt for the first sample
/// and one refinement prompt per following sample.
pub fn learn_schema(
    samples: &[Chunk],
    gateway: &Gateway,
    policy: &RetryPolicy,
    limits: &SchemaLimits,
    scope: Option<String>,
) -> Result<SchemaDoc> {
    let Some((first, rest)) = samples.split_first() else {
        return Err(Error::Input("schema learning needs at least one sample".into()));
    };
    let system = prompts::render(
        prompts::SCHEMA_SYSTEM,
        &[
            ("max_depth", &limits.max_depth.to_string()),
            ("max_properties", &limits.max_properties.to_string()),
        ],
    );

    let ask = |stage: Stage, user: String, index: usize| -> Result<SchemaDoc> {
        let request = PromptRequest::new(stage, system.clone(), user).with_scope(scope.clone());
        let mut accepted = None;
        gateway
            .complete_with_validation(
                &request,
                |resp| {
                    accepted = Some(accept_schema_response(&resp.text, limits)?);
                    Ok(())
                },
                policy,
            )
            .map_err(|e| with_sample_index(e, index))?;
        Ok(accepted.expect("validator accepted a response"))
    };

    let mut doc = ask(
        Stage::SchemaInit,
        prompts::render(prompts::SCHEMA_INIT, &[("sample", &first.text())]),
        0,
    )?;
    for (i, sample) in rest.iter().enumerate() {
        let current = serde_json::to_string_pretty(&doc.json_schema).expect("serializable");
        doc = ask(
            Stage::SchemaRefine,
            prompts::render(
                prompts::SCHEMA_REFINE,
                &[("schema", &current), ("sample", &sample.text())],
            ),
            i + 1,
        )?;
    }
    Ok(doc)
}

pub(crate) fn with_sample_index(e: Error, index: usize) -> Error {
    match e {
        Error::StageExhausted {
            stage,
            attempts,
            last_message,
            ..
        } => Error::StageExhausted {
            stage,
            attempts,
            sample_index: Some(index),
            last_message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step1Schema {
    pub sections: Vec<EntityType>,
}

impl Step1Schema {
    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.name.as_str())
    }

    /// JSON schema form: one object per section, each holding only `input_data`.
    pub fn to_json(&self) -> Value {
        let props: Map<String, Value> = self
            .sections
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    json!({
                        "type": "object",
                        "description": s.description,
                        "properties": {INPUT_DATA: {"type": "string"}},
                        "required": [INPUT_DATA],
                    }),
                )
            })
            .collect();
        json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "type": "object",
            "properties": props,
        })
    }
}

pub fn derive_step1(doc: &SchemaDoc) -> Result<Step1Schema> {
    if doc.entity_types.is_empty() {
        return Err(Error::Schema("schema has no level-1 entity types".into()));
    }
    Ok(Step1Schema {
        sections: doc.entity_types.clone(),
    })
}

/// Section name to the array-of-entities schema its parser must produce.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SectionSchemaMap(pub Map<String, Value>);

impl SectionSchemaMap {
    pub fn get(&self, section: &str) -> Option<&Value> {
        self.0.get(section)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn entity_object_schema(type_schema: &Value) -> Value {
    let is_array = type_schema.get("type").and_then(Value::as_str) == Some("array");
    let mut item = match type_schema.get("items") {
        Some(items) if is_array && items.is_object() => items.clone(),
        _ if is_object_schema(type_schema) => {
            let mut s = type_schema.clone();
            if let Some(o) = s.as_object_mut() {
                o.remove("description");
            }
            s
        }
        _ => json!({"type": "object", "properties": {"value": type_schema.clone()}}),
    };
    if item.get("$ref").is_none() {
        let obj = item.as_object_mut().expect("entity schema is an object");
        obj.entry("type").or_insert_with(|| json!("object"));
        let props = obj
            .entry("properties")
            .or_insert_with(|| json!({}))
            .as_object_mut()
            .expect("properties is an object");
        props
            .entry(INPUT_DATA)
            .or_insert_with(|| json!({"type": "string"}));
        let required = obj.entry("required").or_insert_with(|| json!([]));
        if let Some(r) = required.as_array_mut() {
            if !r.iter().any(|v| v == INPUT_DATA) {
                r.push(json!(INPUT_DATA));
            }
        }
    } else {
        // keep the reference and require input_data alongside it
        item = json!({
            "allOf": [item],
            "type": "object",
            "properties": {INPUT_DATA: {"type": "string"}},
            "required": [INPUT_DATA],
        });
    }
    item
}

pub fn derive_step2(doc: &SchemaDoc) -> Result<SectionSchemaMap> {
    let step1 = derive_step1(doc)?;
    let types = level1_types(&doc.json_schema).expect("step1 found entity types");
    let defs = doc.json_schema.get("$defs").cloned();
    let mut map = Map::new();
    for section in &step1.sections {
        let mut value = json!({
            "$schema": "https://json-schema.org/draft/2020-12/schema",
            "type": "array",
            "description": section.description,
            "items": entity_object_schema(&types[&section.name]),
        });
        if let Some(d) = &defs {
            value["$defs"] = d.clone();
        }
        map.insert(section.name.clone(), value);
    }
    Ok(SectionSchemaMap(map))
}
