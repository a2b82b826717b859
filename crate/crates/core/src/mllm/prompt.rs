use serde::{Deserialize, Serialize};

use super::{Category, InitialResponse, MllmError, UserRequest};
use crate::privacy::{ApprovedCrop, ConsentDecision, ImageBuffer, RequestId};

pub const TEMPLATE_VERSION: u32 = 1;

const INITIAL_TEMPLATE: &str = include_str!("../../templates/initial.v1.txt");
const REFINED_OBJECT_TEMPLATE: &str = include_str!("../../templates/refined_object.v1.txt");
const REFINED_ANIMATION_TEMPLATE: &str = include_str!("../../templates/refined_animation.v1.txt");
const REFINED_ANSWER_TEMPLATE: &str = include_str!("../../templates/refined_answer.v1.txt");
const REPROMPT_TEMPLATE: &str = include_str!("../../templates/reprompt.v1.txt");

/// Inserted in place of the detection list when nothing was detected.
pub const NO_DETECTIONS_MARKER: &str = "(no detections)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    Initial,
    Refined,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Refined => "refined",
        }
    }
}

/// Everything a backend receives for one call. An image can only travel
/// as an [`ApprovedCrop`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub request_id: RequestId,
    pub stage: Stage,
    /// 1 for the first try, 2 for the re-prompt.
    pub attempt: u32,
    pub user_text: String,
    pub text: String,
    pub attachment: Option<ApprovedCrop>,
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

fn fov_block(req: &UserRequest) -> String {
    if req.fov_description.is_empty() {
        NO_DETECTIONS_MARKER.to_owned()
    } else {
        req.fov_description.lines.join("\n")
    }
}

fn image_size_line(req: &UserRequest) -> String {
    req.camera_at_capture
        .as_ref()
        .map(|c| format!("Camera image size: {} x {} pixels.\n", c.image_width, c.image_height))
        .unwrap_or_default()
}

pub fn build_initial_prompt(req: &UserRequest) -> Prompt {
    let text = render(
        INITIAL_TEMPLATE,
        &[
            ("user_text", req.text.as_str()),
            ("fov", &fov_block(req)),
            ("image_size", &image_size_line(req)),
        ],
    );
    Prompt {
        request_id: req.request_id,
        stage: Stage::Initial,
        attempt: 1,
        user_text: req.text.clone(),
        text,
        attachment: None,
    }
}

/// Category-specific second-stage prompt.
///
/// `crop` is the cropped frame together with the consent decision for it.
/// Any crop whose decision is not an approval for this very request is a
/// [`MllmError::PrivacyViolation`], whether or not the backend takes images.
pub fn build_refined_prompt(
    req: &UserRequest,
    initial: &InitialResponse,
    crop: Option<(&ImageBuffer, &ConsentDecision)>,
    accepts_images: bool,
    scene_objects: &[String],
) -> Result<Prompt, MllmError> {
    let approved = crop
        .map(|(img, decision)| ApprovedCrop::new(req.request_id, img.clone(), decision))
        .transpose()
        .map_err(|e| MllmError::PrivacyViolation(e.to_string()))?;
    let attach = approved.filter(|_| accepts_images);
    let template = match initial.category {
        Category::ObjectCreation => REFINED_OBJECT_TEMPLATE,
        Category::AnimationCreation => REFINED_ANIMATION_TEMPLATE,
        Category::SceneQuery | Category::Other => REFINED_ANSWER_TEMPLATE,
    };
    let attachment_note = match (&attach, initial.crop_area) {
        (Some(a), Some(r)) => format!(
            "An image of the region [{:.0}, {:.0}, {:.0}, {:.0}] ({} x {} pixels) is attached.\n",
            r.x,
            r.y,
            r.width,
            r.height,
            a.image().width,
            a.image().height
        ),
        (Some(a), None) => format!("An image ({} x {} pixels) is attached.\n", a.image().width, a.image().height),
        (None, Some(_)) => "No image is available; answer from the detections alone.\n".to_owned(),
        (None, None) => String::new(),
    };
    let scene = if scene_objects.is_empty() {
        String::new()
    } else {
        format!("Virtual objects in the scene: {}\n", scene_objects.join(", "))
    };
    let text = render(
        template,
        &[
            ("user_text", req.text.as_str()),
            ("fov", &fov_block(req)),
            ("image_size", &image_size_line(req)),
            ("attachment_note", &attachment_note),
            ("scene_objects", &scene),
        ],
    );
    Ok(Prompt {
        request_id: req.request_id,
        stage: Stage::Refined,
        attempt: 1,
        user_text: req.text.clone(),
        text,
        attachment: attach,
    })
}

/// The follow-up prompt after a rejected reply, carrying the violation.
pub fn build_reprompt(previous: &Prompt, error: &MllmError) -> Prompt {
    Prompt {
        attempt: previous.attempt + 1,
        text: render(
            REPROMPT_TEMPLATE,
            &[("prompt", previous.text.trim_end()), ("error", &error.to_string())],
        ),
        ..previous.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colocation::UserId;
    use crate::privacy::{describe_frame, BBox, ConsentRegistry, Detection, Rect};

    fn request(dets: &[Detection]) -> UserRequest {
        UserRequest {
            request_id: RequestId(7),
            user_id: UserId::from("alice"),
            text: "put a cube on the keyboard".into(),
            fov_description: describe_frame(dets),
            frame_ref: None,
            camera_at_capture: None,
            issued_at: 0.0,
        }
    }

    fn keyboard() -> Detection {
        Detection::new("keyboard", (327.80, 352.12), BBox::new(66.47, 66.03, 589.13, 638.21), 0.91)
    }

    fn decision(id: u64, approve: bool) -> ConsentDecision {
        let mut reg = ConsentRegistry::default();
        reg.request_consent(RequestId(id), vec![], 0.0).unwrap();
        reg.decide(RequestId(id), approve, 1.0).unwrap()
    }

    #[test]
    fn initial_prompt_embeds_lines_verbatim() {
        let p = build_initial_prompt(&request(&[keyboard()]));
        assert!(p.text.contains(
            "keyboard, center (327.80, 352.12), box (66.47, 66.03, 589.13, 638.21), confidence 0.91"
        ));
        assert!(p.text.contains("put a cube on the keyboard"));
        assert!(p.text.contains("CropArea"));
        assert!(!p.text.contains("{{"));
    }

    #[test]
    fn initial_prompt_marks_empty_view() {
        let p = build_initial_prompt(&request(&[]));
        assert!(p.text.contains(NO_DETECTIONS_MARKER));
    }

    #[test]
    fn prompts_are_deterministic() {
        let r = request(&[keyboard()]);
        assert_eq!(build_initial_prompt(&r).text, build_initial_prompt(&r).text);
        let init = InitialResponse { category: Category::ObjectCreation, crop_area: None };
        let a = build_refined_prompt(&r, &init, None, true, &[]).unwrap();
        let b = build_refined_prompt(&r, &init, None, true, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refined_without_crop_is_text_only() {
        let init = InitialResponse { category: Category::ObjectCreation, crop_area: None };
        let p = build_refined_prompt(&request(&[keyboard()]), &init, None, true, &[]).unwrap();
        assert!(p.attachment.is_none());
        assert!(p.text.contains("prefabName"));
        assert!(!p.text.contains("{{"));
    }

    #[test]
    fn approved_crop_is_attached() {
        let init = InitialResponse {
            category: Category::SceneQuery,
            crop_area: Some(Rect::new(0.0, 0.0, 4.0, 4.0)),
        };
        let img = ImageBuffer::pattern(4, 4, 3, 0);
        let d = decision(7, true);
        let p = build_refined_prompt(&request(&[]), &init, Some((&img, &d)), true, &[]).unwrap();
        assert_eq!(p.attachment.as_ref().unwrap().image(), &img);
        assert!(p.text.contains("is attached"));
        // Text-only backends get the note instead.
        let p = build_refined_prompt(&request(&[]), &init, Some((&img, &d)), false, &[]).unwrap();
        assert!(p.attachment.is_none());
    }

    #[test]
    fn rejected_or_foreign_consent_is_violation() {
        let init = InitialResponse { category: Category::SceneQuery, crop_area: None };
        let img = ImageBuffer::pattern(2, 2, 1, 0);
        for d in [decision(7, false), decision(8, true)] {
            for accepts in [true, false] {
                let e = build_refined_prompt(&request(&[]), &init, Some((&img, &d)), accepts, &[]).unwrap_err();
                assert!(matches!(e, MllmError::PrivacyViolation(_)));
            }
        }
    }

    #[test]
    fn scene_objects_listed() {
        let init = InitialResponse { category: Category::AnimationCreation, crop_area: None };
        let p = build_refined_prompt(&request(&[]), &init, None, true, &["cube-1".into(), "ball-2".into()]).unwrap();
        assert!(p.text.contains("cube-1, ball-2"));
    }

    #[test]
    fn reprompt_appends_violation() {
        let p = build_initial_prompt(&request(&[]));
        let e = MllmError::Schema { path: "/CropArea".into(), message: "missing".into() };
        let r = build_reprompt(&p, &e);
        assert_eq!(r.attempt, 2);
        assert!(r.text.starts_with(p.text.trim_end()));
        assert!(r.text.contains("/CropArea"));
    }
}
