use crate::imaging::{Frame, IdRaster, InstanceId, RgbRaster, View};

use super::{finger_offset, ObjectKind, SceneConfig, SceneState, ROBOT_HAND, ROBOT_LEFT_FINGER, ROBOT_RIGHT_FINGER};

pub const TABLE_GRAY: [f32; 3] = [0.8, 0.8, 0.8];
pub const BASE_VOID: [f32; 3] = [0.3, 0.3, 0.3];
pub const GRIPPER_GRAY: [f32; 3] = [0.5, 0.5, 0.5];
const FINGER_GRAY: [f32; 3] = [0.35, 0.35, 0.35];
const SIDE_SHADE: f32 = 0.75;
const CROSSBAR_HALF_Y: f64 = 0.01;

/// Parallel camera looking down at the table. World point `(x, y, z)` lands
/// on screen at `(x, y - obliqueness * z)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Camera {
    pub origin: [f64; 2],
    pub extent: f64,
    pub res: usize,
    pub obliqueness: f64,
}

impl Camera {
    fn center(&self, i: usize, axis: usize) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * self.extent / self.res as f64
    }

    /// Pixel indices whose centers lie in `[lo, hi)` along `axis`.
    fn span(&self, lo: f64, hi: f64, axis: usize) -> std::ops::Range<usize> {
        let scale = self.res as f64 / self.extent;
        let a = (((lo - self.origin[axis]) * scale - 0.5).floor().max(0.0)) as usize;
        let b = (((hi - self.origin[axis]) * scale + 0.5).ceil().max(0.0) as usize).min(self.res);
        let a = a.min(b);
        let first = (a..b).find(|&i| self.center(i, axis) >= lo).unwrap_or(b);
        let last = (first..b)
            .rev()
            .find(|&i| self.center(i, axis) < hi)
            .map_or(first, |i| i + 1);
        first..last
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Shape {
    /// Screen-space rectangle `[x0, x1) × [y0, y1)`.
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Primitive {
    pub shape: Shape,
    pub color: [f32; 3],
    pub id: InstanceId,
}

pub(crate) struct Canvas {
    pub cam: Camera,
    pub rgb: RgbRaster,
    pub ids: IdRaster,
}

impl Canvas {
    pub fn new(cam: Camera) -> Self {
        let n = cam.res;
        let mut rgb = RgbRaster::filled(n, n, TABLE_GRAY);
        for r in 0..n {
            let y = cam.center(r, 1);
            for c in 0..n {
                let x = cam.center(c, 0);
                if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                    rgb.set(r, c, BASE_VOID);
                }
            }
        }
        Canvas {
            cam,
            rgb,
            ids: IdRaster::background(n, n),
        }
    }

    pub fn draw(&mut self, p: &Primitive) {
        let (x0, x1, y0, y1) = match p.shape {
            Shape::Rect { x0, x1, y0, y1 } => (x0, x1, y0, y1),
            Shape::Disc { cx, cy, r } => (cx - r, cx + r, cy - r, cy + r),
        };
        let cols = self.cam.span(x0, x1, 0);
        for row in self.cam.span(y0, y1, 1) {
            let y = self.cam.center(row, 1);
            for col in cols.clone() {
                if let Shape::Disc { cx, cy, r } = p.shape {
                    let x = self.cam.center(col, 0);
                    if (x - cx).powi(2) + (y - cy).powi(2) >= r * r {
                        continue;
                    }
                }
                self.rgb.set(row, col, p.color);
                self.ids.ids[row * self.cam.res + col] = p.id;
            }
        }
    }
}

fn shade(c: [f32; 3], s: f32) -> [f32; 3] {
    [c[0] * s, c[1] * s, c[2] * s]
}

/// Object and gripper primitives in painter's order (lowest tops first,
/// gripper last).
pub(crate) fn scene_primitives(state: &SceneState, config: &SceneConfig, k: f64) -> Vec<Primitive> {
    let g = &config.geometry;
    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&state.objects[a], &state.objects[b]);
        let ta = oa.position[2] + g.height(oa.kind);
        let tb = ob.position[2] + g.height(ob.kind);
        ta.partial_cmp(&tb)
            .expect("finite heights")
            .then(oa.position[1].partial_cmp(&ob.position[1]).expect("finite"))
            .then(oa.id.cmp(&ob.id))
    });
    let mut prims = Vec::with_capacity(state.objects.len() * 2 + 3);
    for i in order {
        let o = &state.objects[i];
        let [x, y, zb] = o.position;
        let zt = zb + g.height(o.kind);
        match o.kind {
            ObjectKind::Cube => {
                let h = g.cube_side / 2.0;
                if k > 0.0 {
                    // visible front face of the extruded box
                    prims.push(Primitive {
                        shape: Shape::Rect {
                            x0: x - h,
                            x1: x + h,
                            y0: y + h - k * zt,
                            y1: y + h - k * zb,
                        },
                        color: shade(o.color, SIDE_SHADE),
                        id: o.id,
                    });
                }
                prims.push(Primitive {
                    shape: Shape::Rect {
                        x0: x - h,
                        x1: x + h,
                        y0: y - h - k * zt,
                        y1: y + h - k * zt,
                    },
                    color: o.color,
                    id: o.id,
                });
            }
            ObjectKind::Plate => prims.push(Primitive {
                shape: Shape::Disc {
                    cx: x,
                    cy: y - k * zt,
                    r: g.plate_radius,
                },
                color: o.color,
                id: o.id,
            }),
        }
    }
    let gp = state.gripper.position;
    let (cx, cy) = (gp[0], gp[1] - k * gp[2]);
    let off = finger_offset(g, &state.gripper);
    let [fx, fy] = g.finger_half;
    prims.push(Primitive {
        shape: Shape::Rect {
            x0: cx - off - fx,
            x1: cx + off + fx,
            y0: cy - CROSSBAR_HALF_Y,
            y1: cy + CROSSBAR_HALF_Y,
        },
        color: GRIPPER_GRAY,
        id: ROBOT_HAND,
    });
    for (sign, id) in [(-1.0, ROBOT_LEFT_FINGER), (1.0, ROBOT_RIGHT_FINGER)] {
        let fxc = cx + sign * off;
        prims.push(Primitive {
            shape: Shape::Rect {
                x0: fxc - fx,
                x1: fxc + fx,
                y0: cy - fy,
                y1: cy + fy,
            },
            color: FINGER_GRAY,
            id,
        });
    }
    prims
}

pub(crate) fn base_camera(config: &SceneConfig) -> Camera {
    Camera {
        origin: [0.0, 0.0],
        extent: 1.0,
        res: config.resolution,
        obliqueness: config.geometry.base_obliqueness,
    }
}

pub(crate) fn wrist_camera(state: &SceneState, config: &SceneConfig) -> Camera {
    let fov = config.geometry.wrist_fov;
    let p = state.gripper.position;
    Camera {
        origin: [p[0] - fov / 2.0, p[1] - fov / 2.0],
        extent: fov,
        res: config.resolution,
        obliqueness: 0.0,
    }
}

pub(crate) fn render(cam: Camera, prims: &[Primitive], view: View) -> Frame {
    let mut canvas = Canvas::new(cam);
    for p in prims {
        canvas.draw(p);
    }
    Frame::new(canvas.rgb, canvas.ids, view).expect("canvas rasters share a shape")
}

/// Base (whole workspace, slightly oblique so heights and stacks stay
/// visible) and wrist (top-down, centred on the gripper) frames.
pub fn observe_frames(state: &SceneState, config: &SceneConfig) -> (Frame, Frame) {
    let base_cam = base_camera(config);
    let base = render(
        base_cam,
        &scene_primitives(state, config, base_cam.obliqueness),
        View::Base,
    );
    let wrist_cam = wrist_camera(state, config);
    let wrist = render(wrist_cam, &scene_primitives(state, config, 0.0), View::Wrist);
    (base, wrist)
}
