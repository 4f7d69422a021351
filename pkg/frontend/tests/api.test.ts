import { describe, expect, it } from "vitest";

import { ApiClient, ApiError, MalformedEnvelopeError } from "../src/api.js";
import { maskDiffCount, rleDecode } from "../src/rle.js";
import type { AnnotationDoc } from "../src/types.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

const ENVELOPE = {
  task_id: "t1",
  image_id: "img-1",
  image_uri: "/images/img-1.png",
  batch_id: "b1",
  class_catalog: [{ id: "polycrystalline", task: "segmentation" }],
};

describe("ApiClient", () => {
  it("returns the parsed envelope", async () => {
    const client = new ApiClient("", async () => jsonResponse(200, ENVELOPE));
    const envelope = await client.getNextTask("alice");
    expect(envelope?.task_id).toBe("t1");
  });

  it("maps 204 to no-work", async () => {
    const client = new ApiClient("", async () => new Response(null, { status: 204 }));
    expect(await client.getNextTask("alice")).toBeNull();
  });

  it("raises on a malformed envelope without crashing the caller", async () => {
    const client = new ApiClient("", async () => jsonResponse(200, { nope: true }));
    await expect(client.getNextTask("alice")).rejects.toBeInstanceOf(
      MalformedEnvelopeError,
    );
  });

  it("surfaces machine-readable service errors", async () => {
    const client = new ApiClient("", async () =>
      jsonResponse(404, { error: "UnknownLabeler", detail: "labeler 'x' is not registered" }),
    );
    const failure = await client.getNextTask("x").catch((e) => e);
    expect(failure).toBeInstanceOf(ApiError);
    expect(failure.code).toBe("UnknownLabeler");
    expect(failure.status).toBe(404);
  });

  it("round-trips a submission against a simulated store", async () => {
    const stored = new Map<string, AnnotationDoc>();
    const pre = {
      masks: [{ class: "polycrystalline", width: 4, height: 4, rle: [0, 16] }],
    };
    const client = new ApiClient("", async (input, init) => {
      if (String(input).includes("/annotation")) {
        const body = JSON.parse(String(init?.body)) as {
          annotation: AnnotationDoc;
          elapsed_seconds: number;
        };
        stored.set(body.annotation.image_id, body.annotation);
        const before = rleDecode(pre.masks[0].rle, 4, 4);
        const after = rleDecode(body.annotation.masks[0].rle, 4, 4);
        return jsonResponse(200, {
          status: "accepted",
          image_id: body.annotation.image_id,
          correction_cost: {
            image_id: body.annotation.image_id,
            pixels_flipped: maskDiffCount(before, after),
            boxes_added: 0,
            boxes_removed: 0,
            boxes_moved: 0,
          },
        });
      }
      throw new Error(`unexpected request ${input}`);
    });

    const unchanged: AnnotationDoc = {
      image_id: "img-1",
      source: { kind: "human", id: "alice" },
      masks: [{ class: "polycrystalline", width: 4, height: 4, rle: [0, 16] }],
      boxes: [],
      review_state: "draft",
    };
    const ack = await client.submitAnnotation("t1", unchanged, 12);
    expect(ack.correction_cost?.pixels_flipped).toBe(0);
    expect(stored.get("img-1")?.masks[0].rle).toEqual([0, 16]);

    const edited: AnnotationDoc = {
      ...unchanged,
      masks: [{ class: "polycrystalline", width: 4, height: 4, rle: [0, 11, 5] }],
    };
    const ack2 = await client.submitAnnotation("t1", edited, 15);
    expect(ack2.correction_cost?.pixels_flipped).toBe(5);
  });
});
