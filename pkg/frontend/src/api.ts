// Thin client over the labeling service's JSON API.

import type { AnnotationDoc, SubmitAck, TaskEnvelope } from "./types.js";

export class ApiError extends Error {
  readonly status: number;
  readonly code: string;

  constructor(status: number, code: string, detail: string) {
    super(detail);
    this.status = status;
    this.code = code;
  }
}

export class MalformedEnvelopeError extends Error {}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

function validateEnvelope(doc: unknown): TaskEnvelope {
  const d = doc as Partial<TaskEnvelope> | null;
  if (
    !d ||
    typeof d.task_id !== "string" ||
    typeof d.image_id !== "string" ||
    typeof d.image_uri !== "string" ||
    !Array.isArray(d.class_catalog)
  ) {
    throw new MalformedEnvelopeError(`bad task envelope: ${JSON.stringify(doc).slice(0, 120)}`);
  }
  return d as TaskEnvelope;
}

export class ApiClient {
  private readonly base: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async fail(response: Response, fallback: string): Promise<never> {
    let code = fallback;
    let detail = fallback;
    try {
      const body = (await response.json()) as { error?: string; detail?: string };
      code = body.error ?? code;
      detail = body.detail ?? detail;
    } catch {
      // non-JSON error body; keep the fallback
    }
    throw new ApiError(response.status, code, detail);
  }

  async registerLabeler(labelerId: string): Promise<void> {
    const response = await this.fetchImpl(`${this.base}/labelers`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ labeler_id: labelerId }),
    });
    if (!response.ok) await this.fail(response, "registration failed");
  }

  /** Null means no work right now (exhausted batch). */
  async getNextTask(labelerId: string): Promise<TaskEnvelope | null> {
    const response = await this.fetchImpl(
      `${this.base}/tasks/next?labeler=${encodeURIComponent(labelerId)}`,
    );
    if (response.status === 204) return null;
    if (!response.ok) await this.fail(response, "task fetch failed");
    return validateEnvelope(await response.json());
  }

  async submitAnnotation(
    taskId: string,
    annotation: AnnotationDoc,
    elapsedSeconds: number,
  ): Promise<SubmitAck> {
    const response = await this.fetchImpl(`${this.base}/tasks/${taskId}/annotation`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ annotation, elapsed_seconds: elapsedSeconds }),
    });
    if (!response.ok) await this.fail(response, "submission failed");
    return (await response.json()) as SubmitAck;
  }

  imageUrl(imageUri: string): string {
    return `${this.base}${imageUri}`;
  }
}
