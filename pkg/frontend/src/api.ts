/**
 * Typed client for the inference service JSON API.
 *
 * All geometry math lives server-side; this client only moves numbers
 * back and forth unchanged.
 */

export interface ServerInfo {
  stages: number;
  code_dim: number;
  points: number;
  channels: number[];
  image_resolution: number;
  variant: string;
}

export interface CodesPayload {
  code_dim: number;
  stages: number[][];
}

export interface ReconstructResponse {
  upload_id: string;
  points: number[];
  codes: CodesPayload;
}

export interface SweepResponse {
  count: number;
  clouds: number[][];
}

export interface SwapResponse {
  points: number[];
}

export type SwapSelection = { [component: string]: number[] };

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl.replace(/\/$/, "") + path, init);
    if (!resp.ok) {
      let code = "http_error";
      let message = `${resp.status} ${resp.statusText}`;
      try {
        const body = await resp.json();
        if (body && typeof body === "object") {
          code = body.code ?? code;
          message = body.message ?? message;
        }
      } catch {
        /* non-JSON error body; keep the status text */
      }
      throw new ApiError(resp.status, code, message);
    }
    return (await resp.json()) as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  info(): Promise<ServerInfo> {
    return this.request<ServerInfo>("/info");
  }

  health(): Promise<{ status: string }> {
    return this.request<{ status: string }>("/health");
  }

  reconstruct(imagePngBase64: string): Promise<ReconstructResponse> {
    return this.post<ReconstructResponse>("/reconstruct", {
      image_png_base64: imagePngBase64,
    });
  }

  sweep(uploadId: string, stage: number, dim: number, values: number[]): Promise<SweepResponse> {
    return this.post<SweepResponse>("/sweep", {
      upload_id: uploadId,
      stage,
      dim,
      values,
    });
  }

  swap(uploadA: string, uploadB: string, which: SwapSelection): Promise<SwapResponse> {
    return this.post<SwapResponse>("/swap", {
      upload_a: uploadA,
      upload_b: uploadB,
      which,
    });
  }
}
