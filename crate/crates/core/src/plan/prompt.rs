//! The planner prompt template. The wording below is part of the protocol:
//! plans are cached by a content hash of the full message sequence, so any
//! edit here invalidates every cached response. Bump
//! [`PLANNER_TEMPLATE_VERSION`] when changing it.

use crate::client::{sha256_hex, ChatMessage};

use super::InstructionTask;

pub const PLANNER_TEMPLATE_VERSION: &str = "1";

/// System role text. Kept verbatim, including its grammar quirks, because
/// cached responses were recorded against these exact bytes.
const SYSTEM_TEXT: &str = "You are ChatGPT-4, act like visual and instructional experts, generate step-by-step how to do something. each step include the action to indicate how people interact with objecs, and state to show state of objects after finish this action. And relation matrix is the correlation of one step with others in visual. object field indicate the objects in each step similar with privious step in some extends: similar(total similar), shape similar(only similar shape), texture similar( transform shape, only same texture)";

const EXEMPLAR_USER: &str = "The instruction on decorating a cake in 2 steps.";

const EXEMPLAR_ASSISTANT: &str = r#"{
    "goal": "Decorating a Cake",
    "steps": [
        {
            "step": "Setting the Cake on a Platter",
            "object": [["cake", "new"], ["platter", "new"]],
            "action": "Set the baked cake on a platter.",
            "state_of_main_object": "A baked cake on the platter."
        },
        {
            "step": "Applying Icing",
            "object": [["cake", "similar shape", 1], ["spoon", "new"]],
            "action": "Person using a spoon to place some icing on the top of the cake.",
            "state_of_main_object": "The cake covered by icing."
        }
    ],
    "relation": [
        [1.0, 0.5],
        [0.9, 1.0]
    ]
}"#;

/// Three-part message sequence: system instruction, one in-context exemplar
/// pair, then the user turn "The instruction on " + goal + ".". Byte-stable
/// for a fixed template version.
pub fn build_planner_prompt(task: &InstructionTask) -> Vec<ChatMessage> {
    let goal = task.goal().trim_end().trim_end_matches('.');
    vec![
        ChatMessage::system(SYSTEM_TEXT),
        ChatMessage::user(EXEMPLAR_USER),
        ChatMessage::assistant(EXEMPLAR_ASSISTANT),
        ChatMessage::user(format!("The instruction on {goal}.")),
    ]
}

/// Content hash over the fixed template parts, recorded in run manifests so
/// outputs can be traced to the exact prompt wording that produced them.
pub fn planner_template_hash() -> String {
    let mut canon = String::new();
    for part in [PLANNER_TEMPLATE_VERSION, SYSTEM_TEXT, EXEMPLAR_USER, EXEMPLAR_ASSISTANT] {
        canon.push_str(part);
        canon.push('\u{1f}');
    }
    sha256_hex(canon.as_bytes())
}
