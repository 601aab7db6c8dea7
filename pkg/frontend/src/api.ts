import {
  GenerateRequestBody,
  GenerateResponseBody,
  ServiceConfig,
  ServiceErrorBody,
} from "./types.js";

export class ServiceError extends Error {
  readonly status: number;
  readonly code: string;
  readonly field?: string;

  constructor(status: number, body: ServiceErrorBody) {
    super(body.message);
    this.status = status;
    this.code = body.code;
    this.field = body.field;
  }
}

async function throwServiceError(res: Response): Promise<never> {
  let body: ServiceErrorBody;
  try {
    body = (await res.json()) as ServiceErrorBody;
  } catch {
    body = { code: "unknown", message: `HTTP ${res.status}` };
  }
  throw new ServiceError(res.status, body);
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client for the generation service. */
export class StudioApi {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async config(): Promise<ServiceConfig> {
    const res = await this.fetchImpl(`${this.base}/v1/config`);
    if (!res.ok) await throwServiceError(res);
    return res.json();
  }

  async generate(body: GenerateRequestBody): Promise<GenerateResponseBody> {
    const res = await this.fetchImpl(`${this.base}/v1/generate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!res.ok) await throwServiceError(res);
    return res.json();
  }
}
