//! Prompt catalog. Templates use `{{name}}` placeholders, except the
//! classification prompt, which keeps its single-brace fields.

pub const SYSTEM: &str = include_str!("../prompts/system.txt");
pub const SINGLE_TURN_SYSTEM: &str = include_str!("../prompts/single_turn_system.txt");
pub const FEAT_ADD: &str = include_str!("../prompts/feat_add.txt");
pub const BUG_INSTRUCT: &str = include_str!("../prompts/bug_instruct.txt");
pub const CONTINUE_FEAT_ADD: &str = include_str!("../prompts/continue_feat_add.txt");
pub const CONTINUE_BUG_INSTRUCT: &str = include_str!("../prompts/continue_bug_instruct.txt");
pub const DESCRIBE_BUG: &str = include_str!("../prompts/describe_bug.txt");
pub const SOLVE: &str = include_str!("../prompts/solve.txt");
pub const CLASSIFY: &str = include_str!("../prompts/classify.txt");
pub const DEFAULT_GUIDE: &str = include_str!("../prompts/default_guide.txt");
pub const TAXONOMY_SUMMARIZE: &str = include_str!("../prompts/taxonomy_summarize.txt");
pub const TAXONOMY_MERGE: &str = include_str!("../prompts/taxonomy_merge.txt");
pub const TAXONOMY_GUIDE: &str = include_str!("../prompts/taxonomy_guide.txt");

/// Substitutes `{{key}}` placeholders in one pass, so substituted values
/// are never re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    render_with(template, vars, "{{", "}}")
}

/// Same, for `{key}` placeholders.
pub fn render_single(template: &str, vars: &[(&str, &str)]) -> String {
    render_with(template, vars, "{", "}")
}

fn render_with(template: &str, vars: &[(&str, &str)], open: &str, close: &str) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(open) {
        out.push_str(&rest[..i]);
        let after = &rest[i + open.len()..];
        let hit = after.find(close).and_then(|j| {
            let name = &after[..j];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (j, *v))
        });
        match hit {
            Some((j, v)) => {
                out.push_str(v);
                rest = &after[j + close.len()..];
            }
            None => {
                out.push_str(open);
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
