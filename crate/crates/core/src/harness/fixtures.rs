//! Built-in declarations: the pointing example and a larger twelve-node
//! variant used for timing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::doc::ExpectationKind;
use super::scenario::{Expectation, Input, Scenario, TimelineEntry};
use crate::decision::{ActionTemplate, AutonomyMode, DecisionRule, RuleScope};
use crate::engine::Declarations;
use crate::inference::{Cpt, CptRow};
use crate::perception::{Bin, GazeConfig, Scalar, SceneObject, SensorBinding, Transform};
use crate::store::{ModelChain, ModelStore, SlotKey, VariableSpec};

pub const UNDERSTOOD: &str = "[child].understood_pointing";
pub const GAZE: &str = "[child].child_gaze_target";
pub const SAW_GESTURE: &str = "[child].saw_gesture";
pub const ROBOT_FEEDBACK: &str = "[child,robot].robot_feedback";

pub const EXAGGERATE: &str = "exaggerate_gesture";
pub const EXAGGERATE_THRESHOLD: f64 = 0.3;
pub const EXAGGERATE_COOLDOWN_MS: u64 = 5000;

/// Gaze labels in domain order.
pub const GAZE_LABELS: [&str; 3] = ["hand", "object", "elsewhere"];
/// `P(gaze | understood = yes)` in [`GAZE_LABELS`] order.
pub const GAZE_GIVEN_YES: [f64; 3] = [0.1, 0.8, 0.1];
/// `P(gaze | understood = no)`.
pub const GAZE_GIVEN_NO: [f64; 3] = [0.6, 0.1, 0.3];
pub const PRIOR_YES: f64 = 0.5;

/// Where the robot's hand and the pointed-at object sit, in the child's
/// head frame (metres).
pub const HAND_POSITION: [f64; 3] = [1.0, 0.5, 0.0];
pub const OBJECT_POSITION: [f64; 3] = [1.0, -0.5, 0.0];

pub fn slot(s: &str) -> SlotKey {
    s.parse().expect("fixture slot")
}

fn chain(s: &str) -> ModelChain {
    s.parse().expect("fixture chain")
}

fn row(given: &[&str], p: &[f64]) -> CptRow {
    CptRow {
        given: given.iter().map(|s| s.to_string()).collect(),
        p: p.to_vec(),
    }
}

fn gaze_cpt() -> Cpt {
    Cpt {
        node: slot(GAZE),
        parents: vec![slot(UNDERSTOOD)],
        rows: vec![row(&["yes"], &GAZE_GIVEN_YES), row(&["no"], &GAZE_GIVEN_NO)],
    }
}

/// Store with just the understanding and gaze variables.
pub fn pointing_store() -> ModelStore {
    let mut s = ModelStore::default();
    s.register_agent("child").expect("valid id");
    let c = chain("[child]");
    s.declare_variable(&c, VariableSpec::abstract_var("understood_pointing", ["yes", "no"]))
        .expect("fresh store");
    s.declare_variable(&c, VariableSpec::perceived("child_gaze_target", GAZE_LABELS))
        .expect("fresh store");
    s
}

/// The two-node pointing network: `understood -> gaze`, prior 0.5.
pub fn pointing_cpts() -> Vec<Cpt> {
    vec![
        Cpt {
            node: slot(UNDERSTOOD),
            parents: vec![],
            rows: vec![row(&[], &[PRIOR_YES, 1.0 - PRIOR_YES])],
        },
        gaze_cpt(),
    ]
}

fn exaggerate_rule() -> DecisionRule {
    DecisionRule {
        name: "exaggerate_when_misunderstood".into(),
        scope: RuleScope::General,
        when: format!("P({UNDERSTOOD} = yes) < {EXAGGERATE_THRESHOLD}")
            .parse()
            .expect("fixture condition"),
        action: ActionTemplate::new(EXAGGERATE),
        cooldown_ms: EXAGGERATE_COOLDOWN_MS,
    }
}

fn gaze_binding() -> SensorBinding {
    SensorBinding {
        sensor: "gaze_tracker".into(),
        target: slot(GAZE),
        transform: Transform::Gaze(GazeConfig {
            objects: vec![
                SceneObject {
                    label: "hand".into(),
                    position: HAND_POSITION,
                    radius: 0.05,
                },
                SceneObject {
                    label: "object".into(),
                    position: OBJECT_POSITION,
                    radius: 0.05,
                },
            ],
            threshold_deg: 10.0,
        }),
    }
}

/// The pointing example: saw_gesture -> understood -> gaze, plus the
/// child's view of the robot's feedback, one rule and four sensors.
///
/// Seeing the gesture leaves understanding at even odds, so with the
/// gesture observed the gaze update reproduces the two-node fixture.
pub fn pointing_declarations(mode: AutonomyMode) -> Declarations {
    let child = chain("[child]");
    Declarations {
        mode,
        agents: vec!["child".into(), "robot".into()],
        variables: vec![
            (
                child.clone(),
                VariableSpec::perceived("saw_gesture", ["yes", "no"])
                    .with_description("child was looking when the robot pointed"),
            ),
            (
                child.clone(),
                VariableSpec::abstract_var("understood_pointing", ["yes", "no"])
                    .with_description("child understood what the robot pointed at"),
            ),
            (
                child,
                VariableSpec::perceived("child_gaze_target", GAZE_LABELS)
                    .with_description("what the child looks at after the gesture"),
            ),
            (
                chain("[child,robot]"),
                VariableSpec::perceived("robot_feedback", ["thumbs_up", "thumbs_down"])
                    .with_description("feedback the child gave the robot on the tablet"),
            ),
        ],
        nodes: vec![
            Cpt {
                node: slot(SAW_GESTURE),
                parents: vec![],
                rows: vec![row(&[], &[0.7, 0.3])],
            },
            Cpt {
                node: slot(UNDERSTOOD),
                parents: vec![slot(SAW_GESTURE)],
                rows: vec![row(&["yes"], &[0.5, 0.5]), row(&["no"], &[0.05, 0.95])],
            },
            gaze_cpt(),
        ],
        bindings: vec![
            SensorBinding {
                sensor: "gesture_tracker".into(),
                target: slot(SAW_GESTURE),
                transform: Transform::Categorical { field: "saw".into() },
            },
            gaze_binding(),
            SensorBinding {
                sensor: "tablet".into(),
                target: slot(ROBOT_FEEDBACK),
                transform: Transform::Categorical { field: "button".into() },
            },
        ],
        rules: vec![exaggerate_rule()],
        ..Declarations::default()
    }
}

fn event(t: u64, sensor: &str, payload: &[(&str, Scalar)]) -> TimelineEntry {
    TimelineEntry {
        t,
        input: Input::Event {
            sensor: sensor.into(),
            payload: payload.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        },
    }
}

fn token(s: &str) -> Scalar {
    Scalar::Token(s.into())
}

fn expect(at: u64, kind: ExpectationKind, subject: &str, label: Option<&str>, bound: Option<f64>) -> Expectation {
    Expectation {
        at,
        kind,
        subject: subject.into(),
        label: label.map(str::to_string),
        bound,
    }
}

/// The canonical scenario: the child sees the gesture, looks at the hand,
/// then at the object, then gives feedback.
pub fn pointing_scenario(mode: AutonomyMode) -> Scenario {
    use ExpectationKind::*;
    Scenario {
        name: "pointing".into(),
        declarations: pointing_declarations(mode),
        timeline: vec![
            event(1000, "gesture_tracker", &[("saw", token("yes"))]),
            event(
                2000,
                "gaze_tracker",
                &[("yaw_deg", Scalar::Number(26.0)), ("pitch_deg", Scalar::Number(0.0))],
            ),
            event(
                4000,
                "gaze_tracker",
                &[("yaw_deg", Scalar::Number(-27.0)), ("pitch_deg", Scalar::Number(1.0))],
            ),
            event(5000, "tablet", &[("button", token("thumbs_up"))]),
        ],
        expectations: vec![
            expect(1000, PosteriorAbove, UNDERSTOOD, Some("yes"), Some(0.3)),
            expect(2000, ValueEquals, GAZE, Some("hand"), None),
            expect(2000, PosteriorBelow, UNDERSTOOD, Some("yes"), Some(0.3)),
            expect(2000, ProposalCreated, EXAGGERATE, None, None),
            expect(2000, ActionExecuted, EXAGGERATE, None, None),
            expect(4000, ValueEquals, GAZE, Some("object"), None),
            expect(4000, PosteriorAbove, UNDERSTOOD, Some("yes"), Some(0.8)),
            expect(4000, ValueEquals, UNDERSTOOD, Some("yes"), None),
            expect(5000, ValueEquals, ROBOT_FEEDBACK, Some("thumbs_up"), None),
        ],
    }
}

/// Twelve-node extension of the pointing network. CPT rows are drawn from
/// a fixed seed so the file form stays stable.
pub fn large_declarations(mode: AutonomyMode) -> Declarations {
    let mut d = pointing_declarations(mode);
    let child = chain("[child]");
    let extra = [
        (child.clone(), VariableSpec::abstract_var("engagement", ["high", "low"])),
        (
            child.clone(),
            VariableSpec::abstract_var("attention", ["focused", "distracted"]),
        ),
        (
            child.clone(),
            VariableSpec::perceived("head_pose", ["robot", "tablet", "away"]),
        ),
        (
            child.clone(),
            VariableSpec::perceived("task_progress", ["ahead", "on_track", "behind"]),
        ),
        (
            child.clone(),
            VariableSpec::abstract_var("frustration", ["low", "high"]),
        ),
        (
            child.clone(),
            VariableSpec::perceived("speech", ["silent", "talking", "loud"]),
        ),
        (child, VariableSpec::perceived("tablet_touch", ["yes", "no"])),
        (
            chain("[child,robot]"),
            VariableSpec::abstract_var("robot_understood", ["yes", "no"])
                .with_description("child believes the robot understood them"),
        ),
    ];
    d.variables.extend(extra);

    // (node, parents), topologically ordered.
    let structure: [(&str, &[&str]); 12] = [
        ("[child].engagement", &[]),
        ("[child].attention", &["[child].engagement"]),
        ("[child].saw_gesture", &["[child].attention"]),
        ("[child].head_pose", &["[child].attention"]),
        (
            "[child].understood_pointing",
            &["[child].saw_gesture", "[child].attention"],
        ),
        (GAZE, &["[child].understood_pointing"]),
        ("[child].task_progress", &[]),
        (
            "[child].frustration",
            &["[child].task_progress", "[child].understood_pointing"],
        ),
        ("[child].speech", &["[child].engagement", "[child].frustration"]),
        ("[child].tablet_touch", &["[child].engagement"]),
        ("[child,robot].robot_understood", &["[child].understood_pointing"]),
        (
            ROBOT_FEEDBACK,
            &["[child,robot].robot_understood", "[child].frustration"],
        ),
    ];
    let domain = |s: &SlotKey| {
        d.variables
            .iter()
            .find(|(c, v)| *c == s.chain && v.name == s.variable)
            .map(|(_, v)| v.domain.clone())
            .expect("declared above")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut nodes = Vec::new();
    for (node, parents) in structure {
        let node = slot(node);
        if node == slot(GAZE) {
            nodes.push(gaze_cpt());
            continue;
        }
        let parents: Vec<SlotKey> = parents.iter().map(|p| slot(p)).collect();
        let pdoms: Vec<Vec<String>> = parents.iter().map(domain).collect();
        let card = domain(&node).len();
        let rows = super::gen::parent_rows(&pdoms)
            .into_iter()
            .map(|given| CptRow {
                given,
                p: super::gen::random_row(&mut rng, card),
            })
            .collect();
        nodes.push(Cpt { node, parents, rows });
    }
    d.nodes = nodes;

    d.bindings.extend([
        SensorBinding {
            sensor: "head_tracker".into(),
            target: slot("[child].head_pose"),
            transform: Transform::Categorical { field: "facing".into() },
        },
        SensorBinding {
            sensor: "tablet".into(),
            target: slot("[child].tablet_touch"),
            transform: Transform::Categorical { field: "touch".into() },
        },
        SensorBinding {
            sensor: "activity".into(),
            target: slot("[child].task_progress"),
            transform: Transform::Bins {
                field: "score".into(),
                bins: vec![
                    Bin::new(-0.25, "behind"),
                    Bin::new(0.25, "on_track"),
                    Bin::new(f64::INFINITY, "ahead"),
                ],
            },
        },
        SensorBinding {
            sensor: "microphone".into(),
            target: slot("[child].speech"),
            transform: Transform::Bins {
                field: "level_db".into(),
                bins: vec![
                    Bin::new(40.0, "silent"),
                    Bin::new(70.0, "talking"),
                    Bin::new(f64::INFINITY, "loud"),
                ],
            },
        },
    ]);
    d.rules.push(DecisionRule {
        name: "switch_when_frustrated".into(),
        scope: RuleScope::Activity,
        when: "P([child].frustration = high) > 0.7 and not value([child].task_progress) = ahead"
            .parse()
            .expect("fixture condition"),
        action: ActionTemplate::new("switch_activity").with_param("to", "drawing"),
        cooldown_ms: 10_000,
    });
    d
}

/// A two-minute session on the twelve-node network, one sensor event
/// every 250 ms cycling through the sensors.
pub fn large_scenario(mode: AutonomyMode) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut timeline = Vec::new();
    for i in 0..480u64 {
        let t = 1000 + 250 * i;
        let e = match i % 6 {
            0 => event(t, "gesture_tracker", &[("saw", token(pick(&mut rng, &["yes", "no"])))]),
            1 => {
                let yaw = rng.random_range(-40.0..40.0_f64);
                let pitch = rng.random_range(-10.0..10.0_f64);
                event(
                    t,
                    "gaze_tracker",
                    &[
                        ("yaw_deg", Scalar::Number(round2(yaw))),
                        ("pitch_deg", Scalar::Number(round2(pitch))),
                    ],
                )
            }
            2 => event(
                t,
                "head_tracker",
                &[("facing", token(pick(&mut rng, &["robot", "tablet", "away"])))],
            ),
            3 => event(
                t,
                "tablet",
                &[
                    ("touch", token(pick(&mut rng, &["yes", "no"]))),
                    ("button", token(pick(&mut rng, &["thumbs_up", "thumbs_down"]))),
                ],
            ),
            4 => event(
                t,
                "activity",
                &[("score", Scalar::Number(round2(rng.random_range(-1.0..1.0))))],
            ),
            _ => event(
                t,
                "microphone",
                &[("level_db", Scalar::Number(round2(rng.random_range(20.0..90.0))))],
            ),
        };
        timeline.push(e);
    }
    Scenario {
        name: "pointing_large".into(),
        declarations: large_declarations(mode),
        timeline,
        expectations: vec![],
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}
