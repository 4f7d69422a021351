// Wire types mirroring the labeling service's JSON API.

export type TaskType = "segmentation" | "detection";

export interface ClassInfo {
  id: string;
  task: TaskType;
}

export interface MaskDoc {
  class: string;
  width: number;
  height: number;
  rle: number[];
}

export interface BoxDoc {
  class: string;
  x: number;
  y: number;
  w: number;
  h: number;
  score?: number;
}

export interface SourceDoc {
  kind: "human" | "model" | "consensus";
  id?: string;
}

export interface AnnotationDoc {
  image_id: string;
  source: SourceDoc;
  masks: MaskDoc[];
  boxes: BoxDoc[];
  review_state: string;
  elapsed_labeling_seconds?: number;
  seeded_from?: SourceDoc;
}

export interface TaskEnvelope {
  task_id: string;
  image_id: string;
  image_uri: string;
  batch_id: string;
  class_catalog: ClassInfo[];
  pre_annotation?: AnnotationDoc;
}

export interface CorrectionCostDoc {
  image_id: string;
  pixels_flipped: number;
  boxes_added: number;
  boxes_removed: number;
  boxes_moved: number;
  seconds?: number;
}

export interface SubmitAck {
  status: string;
  image_id: string;
  correction_cost?: CorrectionCostDoc;
}

export type Tool = "brush" | "eraser" | "box" | "polygon" | "pan";

export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}
