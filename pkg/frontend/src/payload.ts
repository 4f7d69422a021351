// Builds the submission body from a session: rasters back to RLE, drawn
// boxes to the wire shape, elapsed seconds attached.

import type { CanvasSession } from "./session.js";
import type { AnnotationDoc, BoxDoc, MaskDoc } from "./types.js";

export function buildAnnotationPayload(
  session: CanvasSession,
  labelerId: string,
): AnnotationDoc {
  const masks: MaskDoc[] = [];
  for (const classId of session.segmentationClasses()) {
    const raster = session.maskFor(classId);
    if (raster.isEmpty()) continue; // nothing drawn for this class
    masks.push({
      class: classId,
      width: raster.width,
      height: raster.height,
      rle: raster.toRle(),
    });
  }
  const boxes: BoxDoc[] = [];
  for (const classId of session.detectionClasses()) {
    for (const box of session.boxesFor(classId)) {
      boxes.push({
        class: classId,
        x: Math.round(box.x),
        y: Math.round(box.y),
        w: Math.round(box.w),
        h: Math.round(box.h),
      });
    }
  }
  const doc: AnnotationDoc = {
    image_id: session.task.image_id,
    source: { kind: "human", id: labelerId },
    masks,
    boxes,
    review_state: "draft",
  };
  if (session.task.pre_annotation) {
    doc.seeded_from = session.task.pre_annotation.source;
  }
  return doc;
}
