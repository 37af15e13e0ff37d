/**
 * Typed client for the embedding service HTTP API.
 *
 * Every method maps to one endpoint and returns plain data; nothing here
 * touches the DOM. The fetch implementation is injectable so tests can
 * run against a recorded transcript or a live server without a browser.
 */

/** Stable string identity of one tracked-cell observation: "fov|track|t". */
export type PointKey = string;

/** Build the canonical key for a (fov, track, t) triple. */
export function keyOf(fovId: string, trackId: number, t: number): PointKey {
	return `${fovId}|${trackId}|${t}`;
}

/** Split a canonical key back into its parts. */
export function parseKey(key: PointKey): { fovId: string; trackId: number; t: number } {
	const [fovId, trackId, t] = key.split("|");
	return { fovId, trackId: Number(trackId), t: Number(t) };
}

export interface MetaInfo {
	/** Channel names in storage order. */
	channels: string[];
	/** Minutes between consecutive frames. */
	dt_minutes: number;
	/** All field-of-view identifiers in the dataset. */
	fov_ids: string[];
	/** Stored volume shape as [C, Z, Y, X]. */
	volume_shape: number[];
	/** Number of frames per field of view. */
	n_timepoints: number;
	/** Experimental condition per field of view. */
	conditions: Record<string, string>;
	/** Hours-post-event offset of frame 0, in minutes. */
	t0_hpi_minutes: number;
	/** Total tracked observations in the dataset. */
	n_nodes: number;
	/** Observations with an embedding row. */
	n_embedded: number;
	/** Annotation label types the server accepts. */
	label_types: string[];
	/** Available 2D projection methods. */
	projection_methods: string[];
	/** Available patch render views. */
	patch_views: string[];
	/** Whether per-point predicted labels are loaded. */
	has_predictions: boolean;
	/** Checksum of the model that produced the embeddings. */
	model_checksum: string;
}

export interface ProjectionPoint {
	fov_id: string;
	track_id: number;
	t: number;
	/** 2D projection coordinates. */
	x: number;
	y: number;
	/** Absolute time of this frame, in minutes. */
	hpi_minutes: number;
	/** Experimental condition of the point's field of view. */
	condition: string;
	/** Predicted class, when a probe's predictions are loaded. */
	predicted_label: number | null;
	/** Predicted positive-class probability, when loaded. */
	probability: number | null;
}

export interface AnnotationRecord {
	fov_id: string;
	track_id: number;
	t: number;
	label_type: string;
	value: number;
	source: string;
}

export interface TrackNode {
	t: number;
	z: number;
	y: number;
	x: number;
}

export interface TrackDetail {
	fov_id: string;
	track_id: number;
	/** Parent track when this track starts at a division, else null. */
	parent_track_id: number | null;
	/** Track ids of daughters when this track ends at a division. */
	daughters: number[];
	/** Every tracked observation, in time order. */
	nodes: TrackNode[];
	/** Frames that have an embedding (equivalently, a valid patch). */
	embedded_t: number[];
	annotations: AnnotationRecord[];
	predictions: { t: number; label_type: string; value: number; probability: number }[];
}

/** One field error from a rejected request body or query parameter. */
export interface FieldError {
	loc: (string | number)[];
	msg: string;
}

/** Error carrying the HTTP status and any per-field validation messages. */
export class ApiError extends Error {
	status: number;
	fieldErrors: FieldError[];

	constructor(status: number, message: string, fieldErrors: FieldError[] = []) {
		super(message);
		this.status = status;
		this.fieldErrors = fieldErrors;
	}
}

/** Render an ApiError's field errors as short human-readable lines. */
export function describeErrors(err: ApiError): string[] {
	if (err.fieldErrors.length === 0) return [err.message];
	return err.fieldErrors.map((f) => `${f.loc.join(".")}: ${f.msg}`);
}

async function raiseFor(res: Response): Promise<never> {
	let detail: unknown = null;
	try {
		detail = (await res.json()).detail;
	} catch {
		// non-JSON error body; fall through to the generic message
	}
	if (Array.isArray(detail)) {
		const fields = detail.map((d) => ({
			loc: Array.isArray(d.loc) ? d.loc : [],
			msg: String(d.msg ?? d),
		}));
		throw new ApiError(res.status, `request failed (${res.status})`, fields);
	}
	const msg = typeof detail === "string" ? detail : `request failed (${res.status})`;
	throw new ApiError(res.status, msg);
}

/** The service surface the UI consumes; implemented by ExplorerApi. */
export interface ApiClient {
	meta(): Promise<MetaInfo>;
	projection(method?: string): Promise<ProjectionPoint[]>;
	track(fovId: string, trackId: number): Promise<TrackDetail>;
	annotations(filter?: {
		labelType?: string;
		source?: string;
	}): Promise<AnnotationRecord[]>;
	postAnnotations(
		records: { key: PointKey; labelType: string; value: number }[],
	): Promise<number>;
	patchUrl(
		fovId: string,
		trackId: number,
		t: number,
		channel?: string,
		view?: string,
	): string;
}

export class ExplorerApi implements ApiClient {
	#base: string;
	#fetch: typeof fetch;

	/**
	 * @param baseUrl - Service origin, e.g. "http://127.0.0.1:8000". Empty
	 *   string targets the page's own origin (the served-UI case).
	 * @param fetchFn - fetch implementation; defaults to the global one.
	 */
	constructor(baseUrl = "", fetchFn: typeof fetch = fetch) {
		this.#base = baseUrl.replace(/\/$/, "");
		this.#fetch = fetchFn;
	}

	async #getJson<T>(path: string): Promise<T> {
		const res = await this.#fetch(this.#base + path);
		if (!res.ok) await raiseFor(res);
		return (await res.json()) as T;
	}

	/** Dataset and service capabilities. */
	meta(): Promise<MetaInfo> {
		return this.#getJson<MetaInfo>("/api/meta");
	}

	/** All embedded points under the given 2D projection method. */
	async projection(method = "pca"): Promise<ProjectionPoint[]> {
		const data = await this.#getJson<{ points: ProjectionPoint[] }>(
			`/api/projection?method=${encodeURIComponent(method)}`,
		);
		return data.points;
	}

	/** Full detail for one track: nodes, lineage, labels, valid frames. */
	track(fovId: string, trackId: number): Promise<TrackDetail> {
		return this.#getJson<TrackDetail>(
			`/api/track/${encodeURIComponent(fovId)}/${trackId}`,
		);
	}

	/** Annotation records, optionally filtered. */
	async annotations(filter: { labelType?: string; source?: string } = {}): Promise<
		AnnotationRecord[]
	> {
		const params = new URLSearchParams();
		if (filter.labelType) params.set("label_type", filter.labelType);
		if (filter.source) params.set("source", filter.source);
		const qs = params.toString();
		const data = await this.#getJson<{ annotations: AnnotationRecord[] }>(
			`/api/annotations${qs ? "?" + qs : ""}`,
		);
		return data.annotations;
	}

	/** Post human annotations; resolves to the number written. */
	async postAnnotations(
		records: { key: PointKey; labelType: string; value: number }[],
	): Promise<number> {
		const body = records.map((r) => {
			const { fovId, trackId, t } = parseKey(r.key);
			return {
				fov_id: fovId,
				track_id: trackId,
				t,
				label_type: r.labelType,
				value: r.value,
				source: "human",
			};
		});
		const res = await this.#fetch(this.#base + "/api/annotations", {
			method: "POST",
			headers: { "content-type": "application/json" },
			body: JSON.stringify(body),
		});
		if (!res.ok) await raiseFor(res);
		const data = (await res.json()) as { written: number };
		return data.written;
	}

	/** URL of one patch render; usable directly as an img src. */
	patchUrl(
		fovId: string,
		trackId: number,
		t: number,
		channel = "",
		view = "center_slice",
	): string {
		const params = new URLSearchParams({ view });
		if (channel) params.set("channel", channel);
		return (
			`${this.#base}/api/patch/${encodeURIComponent(fovId)}/${trackId}/${t}` +
			`?${params.toString()}`
		);
	}
}
