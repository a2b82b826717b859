//! The two-stage prompt flow against the scripted backend: detections become
//! the field-of-view text, the initial reply picks a category and the
//! refined reply is validated against that category's schema.

use std::path::PathBuf;

use sharedspace::colocation::UserId;
use sharedspace::mllm::{
    build_initial_prompt, build_refined_prompt, parse_initial_response, parse_refined_response, MockBackend,
    UserRequest,
};
use sharedspace::privacy::{describe_frame, BBox, Detection, RequestId};

fn main() -> anyhow::Result<()> {
    let backend = MockBackend::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/flagship/mock.toml"))?;
    let detections = [
        Detection::new("keyboard", (320.0, 240.0), BBox::new(220.0, 200.0, 420.0, 280.0), 0.93),
        Detection::new("cup", (480.0, 260.0), BBox::new(450.0, 220.0, 510.0, 300.0), 0.88),
    ];
    for text in ["Put a cube on the keyboard", "Make the cube red", "What is on the desk?"] {
        let req = UserRequest {
            request_id: RequestId(1),
            user_id: UserId::from("alice"),
            text: text.into(),
            fov_description: describe_frame(&detections),
            frame_ref: None,
            camera_at_capture: None,
            issued_at: 0.0,
        };
        let first = build_initial_prompt(&req);
        let reply = backend.respond(&first);
        let initial = parse_initial_response(&reply.result?)?;
        let second = build_refined_prompt(&req, &initial, None, false, &["cube-1".to_string()])?;
        let reply = backend.respond(&second);
        let refined = parse_refined_response(&reply.result?, initial.category)?;
        println!("{text:?}\n  category {:?}, crop {:?}\n  {refined:?}", initial.category, initial.crop_area);
    }
    Ok(())
}
