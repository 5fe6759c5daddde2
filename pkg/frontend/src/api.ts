// Typed client for the editing service. All model state changes go through
// these endpoints; the UI never mutates anything locally.

import type { ScribblePayload } from "./mask.js";

export interface InstanceInfo {
  id: number;
  thumbnail_uri: string;
}

export interface JobStatus {
  job_id: string;
  state: "queued" | "running" | "done" | "failed" | "cancelled";
  iteration: number;
  total: number;
  loss: number | null;
  error: string | null;
  preview_uri: string;
}

export interface EditRequestBody {
  kind: string;
  instance: number;
  scribbles: ScribblePayload[];
  target_color?: number[] | string;
  source_instance?: number;
  trainable_scope?: string;
  hyper?: Record<string, number | boolean>;
}

export interface RenderResult {
  blob: Blob;
  etag: string | null;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function expectJson(response: Response): Promise<any> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      detail = (await response.json()).error ?? detail;
    } catch {
      // non-JSON error body
    }
    throw new ApiError(response.status, detail);
  }
  return response.json();
}

export class CnerfClient {
  constructor(public base: string = "") {}

  async createSession(checkpoint: string, dataset: string): Promise<string> {
    const r = await fetch(`${this.base}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ checkpoint, dataset }),
    });
    return (await expectJson(r)).session_id;
  }

  async listInstances(sessionId: string): Promise<InstanceInfo[]> {
    const r = await fetch(`${this.base}/sessions/${sessionId}/instances`);
    return (await expectJson(r)).instances;
  }

  renderUrl(sessionId: string, instance: number, view: number, res: number): string {
    return `${this.base}/sessions/${sessionId}/render?instance=${instance}&view=${view}&res=${res}`;
  }

  async fetchRender(sessionId: string, instance: number, view: number,
                    res: number): Promise<RenderResult> {
    const r = await fetch(this.renderUrl(sessionId, instance, view, res));
    if (!r.ok) throw new ApiError(r.status, await r.text());
    return { blob: await r.blob(), etag: r.headers.get("ETag") };
  }

  async submitEdit(sessionId: string, body: EditRequestBody,
                   idempotencyKey?: string): Promise<string> {
    const headers: Record<string, string> = { "Content-Type": "application/json" };
    if (idempotencyKey) headers["Idempotency-Key"] = idempotencyKey;
    const r = await fetch(`${this.base}/sessions/${sessionId}/edits`, {
      method: "POST",
      headers,
      body: JSON.stringify(body),
    });
    return (await expectJson(r)).job_id;
  }

  async jobStatus(jobId: string): Promise<JobStatus> {
    const r = await fetch(`${this.base}/edits/${jobId}`);
    return expectJson(r);
  }

  async cancelJob(jobId: string): Promise<JobStatus> {
    const r = await fetch(`${this.base}/edits/${jobId}/cancel`, { method: "POST" });
    return expectJson(r);
  }

  async pollUntilDone(jobId: string, onProgress?: (s: JobStatus) => void,
                      intervalMs: number = 500): Promise<JobStatus> {
    for (;;) {
      const status = await this.jobStatus(jobId);
      if (onProgress) onProgress(status);
      if (status.state === "done" || status.state === "failed"
          || status.state === "cancelled") {
        return status;
      }
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }

  async undo(sessionId: string): Promise<string> {
    const r = await fetch(`${this.base}/sessions/${sessionId}/undo`, { method: "POST" });
    return (await expectJson(r)).reverted_job_id;
  }

  async transferPreview(sessionId: string, instance: number, donor: number,
                        what: "color" | "shape"): Promise<string[]> {
    const r = await fetch(`${this.base}/sessions/${sessionId}/transfer`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ instance, donor, what }),
    });
    return (await expectJson(r)).previews;
  }

  async transferCommit(sessionId: string, instance: number, donor: number,
                       what: "color" | "shape"): Promise<void> {
    const r = await fetch(`${this.base}/sessions/${sessionId}/transfer/commit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ instance, donor, what }),
    });
    await expectJson(r);
  }

  /** Server-side rasterization of a scribble; returns the PNG bytes. */
  async echoScribble(sessionId: string, scribble: ScribblePayload): Promise<Uint8Array> {
    const r = await fetch(`${this.base}/sessions/${sessionId}/scribbles/echo`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(scribble),
    });
    if (!r.ok) throw new ApiError(r.status, await r.text());
    return new Uint8Array(await r.arrayBuffer());
  }
}
