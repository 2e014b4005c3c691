//! Prompt templates. The wording is tunable; only the placeholders are relied on.

pub const SCHEMA_SYSTEM: &str = include_str!("../prompts/schema_system.txt");
pub const SCHEMA_INIT: &str = include_str!("../prompts/schema_init.txt");
pub const SCHEMA_REFINE: &str = include_str!("../prompts/schema_refine.txt");
pub const SCRIPT_SYSTEM: &str = include_str!("../prompts/script_system.txt");
pub const SPLITTER_INIT: &str = include_str!("../prompts/splitter_init.txt");
pub const SPLITTER_REFINE: &str = include_str!("../prompts/splitter_refine.txt");
pub const PARSER_INIT: &str = include_str!("../prompts/parser_init.txt");
pub const PARSER_REFINE: &str = include_str!("../prompts/parser_refine.txt");
pub const QUERY_GRAPH: &str = include_str!("../prompts/query_graph.txt");
pub const QUERY_TEXT: &str = include_str!("../prompts/query_text.txt");
pub const QUERY_HYBRID: &str = include_str!("../prompts/query_hybrid.txt");
pub const SYNTHESIZE: &str = include_str!("../prompts/synthesize.txt");
pub const GRAMMAR: &str = include_str!("../prompts/grammar.txt");
pub const TEXT_SYNTAX: &str = include_str!("../prompts/text_syntax.txt");

/// Replaces each `{{key}}` with its value.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_placeholders() {
        assert_eq!(render("a {{x}} b {{x}}", &[("x", "1")]), "a 1 b 1");
        assert!(!render(SCHEMA_INIT, &[("sample", "s")]).contains("{{"));
    }
}
