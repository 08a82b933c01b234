// Typed client for the annotation service REST contract.

import type {
  AnnotationAck,
  AnnotationSubmit,
  AnnotationTask,
  ErrorBody,
  Progress,
  UiConfig,
} from './types.js';

/** Non-2xx reply; `kind` is the server-side error class name. */
export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly kind: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }

  get staleLease(): boolean {
    return this.kind === 'StaleLeaseError';
  }
}

/** The request never reached the service (offline, refused, dropped). */
export class TransportError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'TransportError';
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly base: string = '',
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  imageUrl(ref: string): string {
    return this.base + ref;
  }

  async config(): Promise<UiConfig> {
    return this.requestJson('GET', '/api/config');
  }

  async nextTask(annotator: string): Promise<AnnotationTask | null> {
    const response = await this.send(
      'GET',
      `/api/tasks/next?annotator=${encodeURIComponent(annotator)}`,
    );
    if (response.status === 204) {
      return null;
    }
    await this.raiseForStatus(response);
    return (await response.json()) as AnnotationTask;
  }

  async submit(body: AnnotationSubmit): Promise<AnnotationAck> {
    return this.requestJson('POST', '/api/annotations', body);
  }

  async progress(): Promise<Progress> {
    return this.requestJson('GET', '/api/progress');
  }

  private async send(method: string, path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { 'content-type': 'application/json' };
      init.body = JSON.stringify(body);
    }
    try {
      return await this.fetchImpl(this.base + path, init);
    } catch (err) {
      throw new TransportError(`service unreachable: ${String(err)}`);
    }
  }

  private async raiseForStatus(response: Response): Promise<void> {
    if (response.ok) {
      return;
    }
    let kind = 'HttpError';
    let message = `status ${response.status}`;
    try {
      const body = (await response.json()) as ErrorBody;
      kind = body.kind ?? kind;
      message = body.error ?? message;
    } catch {
      // non-JSON error body; keep the status-derived message
    }
    throw new ApiError(response.status, kind, message);
  }

  private async requestJson<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.send(method, path, body);
    await this.raiseForStatus(response);
    return (await response.json()) as T;
  }
}
