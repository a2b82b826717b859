use std::sync::OnceLock;

use jsonschema::Validator;
use serde_json::Value;

use super::{Category, InitialResponse, MllmError, RefinedResponse};
use crate::privacy::Rect;

pub const SCHEMA_VERSION: u32 = 1;

pub const INITIAL_SCHEMA: &str = include_str!("../../schemas/initial_response.v1.json");
pub const OBJECT_CREATION_SCHEMA: &str = include_str!("../../schemas/object_creation.v1.json");
pub const ANIMATION_CREATION_SCHEMA: &str = include_str!("../../schemas/animation_creation.v1.json");
pub const SCENE_QUERY_ANSWER_SCHEMA: &str = include_str!("../../schemas/scene_query_answer.v1.json");

fn compile(text: &str) -> Validator {
    let schema: Value = serde_json::from_str(text).expect("bundled schema is valid JSON");
    jsonschema::validator_for(&schema).expect("bundled schema compiles")
}

fn initial_validator() -> &'static Validator {
    static V: OnceLock<Validator> = OnceLock::new();
    V.get_or_init(|| compile(INITIAL_SCHEMA))
}

fn refined_validator(category: Category) -> &'static Validator {
    static OBJ: OnceLock<Validator> = OnceLock::new();
    static ANIM: OnceLock<Validator> = OnceLock::new();
    static ANS: OnceLock<Validator> = OnceLock::new();
    match category {
        Category::ObjectCreation => OBJ.get_or_init(|| compile(OBJECT_CREATION_SCHEMA)),
        Category::AnimationCreation => ANIM.get_or_init(|| compile(ANIMATION_CREATION_SCHEMA)),
        Category::SceneQuery | Category::Other => ANS.get_or_init(|| compile(SCENE_QUERY_ANSWER_SCHEMA)),
    }
}

/// Drops one surrounding Markdown code fence, if any.
fn strip_fence(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

fn parse_json(raw: &str) -> Result<Value, MllmError> {
    serde_json::from_str(strip_fence(raw)).map_err(|e| MllmError::Schema {
        path: String::new(),
        message: format!("not valid JSON: {e}"),
    })
}

fn check(validator: &Validator, value: &Value) -> Result<(), MllmError> {
    validator.validate(value).map_err(|e| MllmError::Schema {
        path: e.instance_path().to_string(),
        message: e.to_string(),
    })
}

pub fn parse_initial_response(raw: &str) -> Result<InitialResponse, MllmError> {
    let v = parse_json(raw)?;
    check(initial_validator(), &v)?;
    let category: Category = serde_json::from_value(v["category"].clone()).expect("schema fixes the enum");
    let crop_area = match &v["CropArea"] {
        Value::Array(a) => {
            let n: Vec<f64> = a.iter().map(|x| x.as_f64().expect("schema fixes numbers")).collect();
            let rect = Rect::new(n[0], n[1], n[2], n[3]);
            if !rect.is_valid() {
                return Err(MllmError::Schema {
                    path: "/CropArea".into(),
                    message: "crop width and height must be positive".into(),
                });
            }
            Some(rect)
        }
        _ => None,
    };
    Ok(InitialResponse { category, crop_area })
}

pub fn parse_refined_response(raw: &str, category: Category) -> Result<RefinedResponse, MllmError> {
    let v = parse_json(raw)?;
    check(refined_validator(category), &v)?;
    let de = |e: serde_json::Error| MllmError::Schema {
        path: String::new(),
        message: e.to_string(),
    };
    Ok(match category {
        Category::ObjectCreation => RefinedResponse::ObjectCreation(serde_json::from_value(v).map_err(de)?),
        Category::AnimationCreation => RefinedResponse::AnimationCreation(serde_json::from_value(v).map_err(de)?),
        Category::SceneQuery | Category::Other => {
            RefinedResponse::SceneQueryAnswer(serde_json::from_value(v).map_err(de)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mllm::{Space, AnimationCreation, ObjectCreation, ParamValue, SceneQueryAnswer};
    use proptest::prelude::*;

    fn schema_path(e: MllmError) -> String {
        match e {
            MllmError::Schema { path, .. } => path,
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn initial_none_string() {
        let r = parse_initial_response(r#"{"category":"sceneQuery","CropArea":"None"}"#).unwrap();
        assert_eq!(r, InitialResponse { category: Category::SceneQuery, crop_area: None });
    }

    #[test]
    fn initial_null_and_rect() {
        let r = parse_initial_response(r#"{"category":"other","CropArea":null}"#).unwrap();
        assert_eq!(r.crop_area, None);
        let r = parse_initial_response(r#"{"category":"objectCreation","CropArea":[10,20,100,80]}"#).unwrap();
        assert_eq!(r.crop_area, Some(Rect::new(10.0, 20.0, 100.0, 80.0)));
    }

    #[test]
    fn initial_missing_crop_area() {
        let e = parse_initial_response(r#"{"category":"objectCreation"}"#).unwrap_err();
        assert!(matches!(e, MllmError::Schema { .. }));
    }

    #[test]
    fn initial_violations_carry_paths() {
        assert_eq!(
            schema_path(parse_initial_response(r#"{"category":"dance","CropArea":"None"}"#).unwrap_err()),
            "/category"
        );
        assert_eq!(
            schema_path(parse_initial_response(r#"{"category":"other","CropArea":[1,2,3]}"#).unwrap_err()),
            "/CropArea"
        );
        assert_eq!(
            schema_path(parse_initial_response(r#"{"category":"other","CropArea":[1,2,0,5]}"#).unwrap_err()),
            "/CropArea"
        );
        assert!(parse_initial_response(r#"{"category":"other","CropArea":"none"}"#).is_err());
        assert!(parse_initial_response("not json").is_err());
    }

    #[test]
    fn code_fence_is_tolerated() {
        let raw = "```json\n{\"category\":\"sceneQuery\",\"CropArea\":\"None\"}\n```";
        assert_eq!(parse_initial_response(raw).unwrap().category, Category::SceneQuery);
    }

    #[test]
    fn refined_object_creation() {
        let r = parse_refined_response(
            r#"{"prefabName":"cube","space":"pixel","position":[327.8,352.1,0]}"#,
            Category::ObjectCreation,
        )
        .unwrap();
        assert_eq!(
            r,
            RefinedResponse::ObjectCreation(ObjectCreation {
                prefab_name: "cube".into(),
                space: Space::Pixel,
                position: [327.8, 352.1, 0.0],
                parent_object: None,
            })
        );
    }

    #[test]
    fn refined_animation() {
        let r = parse_refined_response(
            r#"{"actionType":"moveTo","objectName":"cube","space":"world","position":[1,0,2]}"#,
            Category::AnimationCreation,
        )
        .unwrap();
        let RefinedResponse::AnimationCreation(a) = r else { panic!() };
        assert_eq!(a.action_type, "moveTo");
        assert_eq!(a.position, [1.0, 0.0, 2.0]);
        assert_eq!(a.space, Space::World);
    }

    #[test]
    fn refined_position_arity() {
        let e = parse_refined_response(
            r#"{"prefabName":"cube","space":"pixel","position":[1,2]}"#,
            Category::ObjectCreation,
        )
        .unwrap_err();
        assert_eq!(schema_path(e), "/position");
    }

    #[test]
    fn refined_space_enum_and_extras() {
        assert!(parse_refined_response(
            r#"{"prefabName":"cube","space":"screen","position":[1,2,3]}"#,
            Category::ObjectCreation
        )
        .is_err());
        assert!(parse_refined_response(
            r#"{"prefabName":"cube","space":"world","position":[1,2,3],"color":"red"}"#,
            Category::ObjectCreation
        )
        .is_err());
        // Right payload, wrong category.
        assert!(parse_refined_response(r#"{"answerText":"hi"}"#, Category::ObjectCreation).is_err());
    }

    #[test]
    fn answer_for_query_and_other() {
        for c in [Category::SceneQuery, Category::Other] {
            let r = parse_refined_response(r#"{"answerText":"a red mug"}"#, c).unwrap();
            assert_eq!(r, RefinedResponse::SceneQueryAnswer(SceneQueryAnswer { answer_text: "a red mug".into() }));
        }
    }

    fn arb_space() -> impl Strategy<Value = Space> {
        prop_oneof![Just(Space::World), Just(Space::Local), Just(Space::Pixel)]
    }

    fn arb_refined() -> impl Strategy<Value = RefinedResponse> {
        let pos = prop::array::uniform3(-1e4f64..1e4);
        let name = "[a-zA-Z][a-zA-Z0-9 _-]{0,15}";
        prop_oneof![
            (name, arb_space(), pos.clone(), prop::option::of(name)).prop_map(|(n, s, p, parent)| {
                RefinedResponse::ObjectCreation(ObjectCreation { prefab_name: n, space: s, position: p, parent_object: parent })
            }),
            (name, name, arb_space(), pos, prop::collection::btree_map("[a-z]{1,6}", prop_oneof![
                any::<bool>().prop_map(ParamValue::Bool),
                (-1e6f64..1e6).prop_map(ParamValue::Number),
                "[a-z]{0,8}".prop_map(ParamValue::Text),
            ], 0..3))
                .prop_map(|(a, o, s, p, params)| RefinedResponse::AnimationCreation(AnimationCreation {
                    action_type: a, object_name: o, space: s, position: p, parameters: params,
                })),
            ".{0,40}".prop_map(|t| RefinedResponse::SceneQueryAnswer(SceneQueryAnswer { answer_text: t })),
        ]
    }

    proptest! {
        #[test]
        fn accepted_responses_round_trip(r in arb_refined()) {
            let json = r.to_json();
            let back = parse_refined_response(&json, r.category()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
