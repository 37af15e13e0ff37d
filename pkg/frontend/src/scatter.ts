/**
 * Canvas scatter view of the 2D projection.
 *
 * Holds the loaded points in flat typed arrays and renders on demand: any
 * state change schedules a single animation frame, and each frame is one
 * pass over the points grouped by color (one fill per color bucket), so a
 * 10k-point dataset pans and zooms smoothly without allocations.
 *
 * Geometry (hit testing, lasso containment, the view transform) is kept
 * separate from painting, and painting is skipped when no 2D context is
 * available, so the interaction logic runs under a DOM emulator in tests.
 */

import type { PointKey } from "./api.js";
import { Emitter } from "./emitter.js";
import { boundsOf, pointInPolygon, Pt, ViewTransform } from "./geometry.js";

export interface ScatterPoint {
	key: PointKey;
	/** Projection coordinates (data space). */
	x: number;
	y: number;
}

/** One vertex of the active track's trajectory overlay. */
export interface TrajectoryPoint {
	key: PointKey;
	x: number;
	y: number;
	/** Frame index, used to draw dashed segments across frame gaps. */
	t: number;
}

export interface ScatterEvents {
	/** Fired when a lasso closes around a (possibly empty) set of points. */
	lasso: { keys: PointKey[] };
	/** Fired on click: the hit point's key, or null for empty space. */
	pick: { key: PointKey | null };
}

export interface ScatterOptions {
	/** Canvas size in CSS pixels; defaults to the container's size. */
	width?: number;
	height?: number;
	/** Point radius in CSS pixels. Default: 3. */
	pointRadius?: number;
	/** Device pixel ratio override. Default: window.devicePixelRatio. */
	pixelRatio?: number;
	/** Canvas background. Default: white. */
	background?: string;
}

/** Pixel slack added to the point radius for click hit-testing. */
const PICK_SLACK = 4;
/** Drag distance below which a mouse gesture counts as a click. */
const CLICK_TOLERANCE = 4;

type Interaction = "pan" | "lasso";

export class ScatterPlot {
	#canvas: HTMLCanvasElement;
	#ctx: CanvasRenderingContext2D | null;
	#opts: Required<Pick<ScatterOptions, "pointRadius" | "background">> &
		ScatterOptions;
	#emitter = new Emitter<ScatterEvents>();
	#view = new ViewTransform();

	#keys: PointKey[] = [];
	#xs = new Float64Array(0);
	#ys = new Float64Array(0);
	#indexOfKey = new Map<PointKey, number>();
	#colors: string[] = [];
	#buckets = new Map<string, number[]>();
	#selected: ReadonlySet<PointKey> = new Set();
	#trajectory: TrajectoryPoint[] | null = null;
	#currentKey: PointKey | null = null;

	#mode: Interaction = "pan";
	#dragging = false;
	#dragMoved = 0;
	#lastX = 0;
	#lastY = 0;
	#lassoPath: Pt[] = [];
	#pendingFrame = 0;
	#detach: (() => void)[] = [];

	constructor(container: HTMLElement, opts: ScatterOptions = {}) {
		this.#opts = {
			pointRadius: opts.pointRadius ?? 3,
			background: opts.background ?? "#ffffff",
			...opts,
		};
		this.#canvas = document.createElement("canvas");
		this.#canvas.style.display = "block";
		this.#canvas.style.width = "100%";
		this.#canvas.style.height = "100%";
		container.appendChild(this.#canvas);
		this.#ctx = this.#canvas.getContext("2d");
		this.#sizeCanvas();

		const listen = <K extends keyof HTMLElementEventMap>(
			event: K,
			fn: (e: HTMLElementEventMap[K]) => void,
		) => {
			this.#canvas.addEventListener(event, fn);
			this.#detach.push(() => this.#canvas.removeEventListener(event, fn));
		};
		listen("mousedown", (e) => this.#onDown(e));
		listen("mousemove", (e) => this.#onMove(e));
		listen("mouseup", (e) => this.#onUp(e));
		listen("mouseleave", () => this.#onLeave());
		listen("wheel", (e) => this.#onWheel(e));
		listen("dblclick", () => this.fitView());

		if (typeof ResizeObserver !== "undefined" && opts.width === undefined) {
			const observer = new ResizeObserver(() => this.resize());
			observer.observe(container);
			this.#detach.push(() => observer.disconnect());
		}
	}

	/** CSS-pixel width the view math runs in. */
	get width(): number {
		return this.#opts.width ?? (this.#canvas.clientWidth || 800);
	}

	get height(): number {
		return this.#opts.height ?? (this.#canvas.clientHeight || 600);
	}

	/** Load the point set and fit the view to it. */
	setPoints(points: ScatterPoint[]): void {
		this.#keys = points.map((p) => p.key);
		this.#xs = new Float64Array(points.length);
		this.#ys = new Float64Array(points.length);
		this.#indexOfKey.clear();
		points.forEach((p, i) => {
			this.#xs[i] = p.x;
			this.#ys[i] = p.y;
			this.#indexOfKey.set(p.key, i);
		});
		this.#colors = new Array(points.length).fill("#808080");
		this.#rebuildBuckets();
		this.fitView();
	}

	/** Set per-point colors, parallel to the loaded points. */
	setColors(colors: readonly string[]): void {
		if (colors.length !== this.#keys.length) {
			throw new Error(
				`expected ${this.#keys.length} colors, got ${colors.length}`,
			);
		}
		this.#colors = colors.slice();
		this.#rebuildBuckets();
		this.#markDirty();
	}

	/** Current per-point colors (parallel to the loaded points). */
	getColors(): readonly string[] {
		return this.#colors;
	}

	/** Color of one point by key, or undefined for unknown keys. */
	colorOf(key: PointKey): string | undefined {
		const i = this.#indexOfKey.get(key);
		return i === undefined ? undefined : this.#colors[i];
	}

	/** Mark a set of keys as selected (drawn with an outline ring). */
	setSelection(keys: ReadonlySet<PointKey>): void {
		this.#selected = keys;
		this.#markDirty();
	}

	/** Overlay a track trajectory; currentKey gets the playback marker. */
	setTrajectory(
		polyline: TrajectoryPoint[] | null,
		currentKey: PointKey | null,
	): void {
		this.#trajectory = polyline;
		this.#currentKey = currentKey;
		this.#markDirty();
	}

	/** Currently marked playback point, if any. */
	get currentKey(): PointKey | null {
		return this.#currentKey;
	}

	/** Switch between pan/zoom and lasso drag behavior. */
	setMode(mode: Interaction): void {
		this.#mode = mode;
		this.#canvas.style.cursor = mode === "lasso" ? "crosshair" : "grab";
	}

	get mode(): Interaction {
		return this.#mode;
	}

	/** Subscribe to events; returns an unsubscribe function. */
	on<K extends keyof ScatterEvents & string>(
		event: K,
		fn: (data: ScatterEvents[K]) => void,
	): () => void {
		return this.#emitter.on(event, fn);
	}

	/** Refit the view transform to the loaded points. */
	fitView(): void {
		const pts: Pt[] = [];
		for (let i = 0; i < this.#xs.length; i++) {
			pts.push({ x: this.#xs[i], y: this.#ys[i] });
		}
		this.#view.fit(boundsOf(pts), this.width, this.height, 24);
		this.#markDirty();
	}

	/** Screen position of a loaded point, in canvas CSS pixels. */
	screenOf(key: PointKey): Pt | null {
		const i = this.#indexOfKey.get(key);
		if (i === undefined) return null;
		return this.#view.toScreen({ x: this.#xs[i], y: this.#ys[i] });
	}

	/** Index of the point within picking distance of a canvas position, or -1. */
	hitTest(canvasX: number, canvasY: number): number {
		const maxDist = this.#opts.pointRadius + PICK_SLACK;
		let best = -1;
		let bestD2 = maxDist * maxDist;
		for (let i = 0; i < this.#xs.length; i++) {
			const s = this.#view.toScreen({ x: this.#xs[i], y: this.#ys[i] });
			const dx = s.x - canvasX;
			const dy = s.y - canvasY;
			const d2 = dx * dx + dy * dy;
			if (d2 <= bestD2) {
				bestD2 = d2;
				best = i;
			}
		}
		return best;
	}

	/** Keys of all points inside a canvas-space polygon. */
	keysInPolygon(polygon: readonly Pt[]): PointKey[] {
		if (polygon.length < 3) return [];
		const keys: PointKey[] = [];
		for (let i = 0; i < this.#xs.length; i++) {
			const s = this.#view.toScreen({ x: this.#xs[i], y: this.#ys[i] });
			if (pointInPolygon(s, polygon)) keys.push(this.#keys[i]);
		}
		return keys;
	}

	/** Run a lasso selection programmatically and emit the lasso event. */
	selectWithPolygon(polygon: readonly Pt[]): PointKey[] {
		const keys = this.keysInPolygon(polygon);
		this.#emitter.emit("lasso", { keys });
		return keys;
	}

	/** Recompute the canvas backing-store size after a layout change. */
	resize(): void {
		this.#sizeCanvas();
		this.#markDirty();
	}

	destroy(): void {
		if (this.#pendingFrame !== 0 && typeof cancelAnimationFrame !== "undefined") {
			cancelAnimationFrame(this.#pendingFrame);
		}
		for (const fn of this.#detach) fn();
		this.#emitter.clear();
		this.#canvas.remove();
	}

	#sizeCanvas(): void {
		const dpr = this.#opts.pixelRatio ?? (globalThis.devicePixelRatio || 1);
		this.#canvas.width = Math.max(1, Math.round(this.width * dpr));
		this.#canvas.height = Math.max(1, Math.round(this.height * dpr));
		this.#ctx?.setTransform(dpr, 0, 0, dpr, 0, 0);
	}

	#rebuildBuckets(): void {
		this.#buckets.clear();
		for (let i = 0; i < this.#colors.length; i++) {
			const color = this.#colors[i];
			let bucket = this.#buckets.get(color);
			if (!bucket) {
				bucket = [];
				this.#buckets.set(color, bucket);
			}
			bucket.push(i);
		}
	}

	#canvasPos(e: MouseEvent): Pt {
		const rect = this.#canvas.getBoundingClientRect();
		return { x: e.clientX - rect.left, y: e.clientY - rect.top };
	}

	#onDown(e: MouseEvent): void {
		const p = this.#canvasPos(e);
		this.#dragging = true;
		this.#dragMoved = 0;
		this.#lastX = p.x;
		this.#lastY = p.y;
		if (this.#mode === "lasso") this.#lassoPath = [p];
	}

	#onMove(e: MouseEvent): void {
		if (!this.#dragging) return;
		const p = this.#canvasPos(e);
		this.#dragMoved += Math.abs(p.x - this.#lastX) + Math.abs(p.y - this.#lastY);
		if (this.#mode === "lasso") {
			this.#lassoPath.push(p);
			this.#markDirty();
		} else {
			this.#view.panBy(p.x - this.#lastX, p.y - this.#lastY);
			this.#markDirty();
		}
		this.#lastX = p.x;
		this.#lastY = p.y;
	}

	#onUp(e: MouseEvent): void {
		if (!this.#dragging) return;
		this.#dragging = false;
		const p = this.#canvasPos(e);
		if (this.#dragMoved < CLICK_TOLERANCE) {
			const hit = this.hitTest(p.x, p.y);
			this.#emitter.emit("pick", { key: hit >= 0 ? this.#keys[hit] : null });
			this.#lassoPath = [];
			this.#markDirty();
			return;
		}
		if (this.#mode === "lasso" && this.#lassoPath.length >= 3) {
			this.selectWithPolygon(this.#lassoPath);
		}
		this.#lassoPath = [];
		this.#markDirty();
	}

	#onLeave(): void {
		this.#dragging = false;
		this.#lassoPath = [];
		this.#markDirty();
	}

	#onWheel(e: WheelEvent): void {
		e.preventDefault();
		const p = this.#canvasPos(e);
		const factor = Math.exp(-e.deltaY * 0.0015);
		this.#view.zoomAt(p, factor);
		this.#markDirty();
	}

	/** Schedule a single render frame if none is pending. */
	#markDirty(): void {
		if (this.#ctx === null || this.#pendingFrame !== 0) return;
		if (typeof requestAnimationFrame === "undefined") {
			this.#render();
			return;
		}
		this.#pendingFrame = requestAnimationFrame(() => {
			this.#pendingFrame = 0;
			this.#render();
		});
	}

	#render(): void {
		const ctx = this.#ctx;
		if (!ctx) return;
		const r = this.#opts.pointRadius;
		ctx.fillStyle = this.#opts.background;
		ctx.fillRect(0, 0, this.width, this.height);

		// Points, one fill per color bucket.
		for (const [color, indices] of this.#buckets) {
			ctx.fillStyle = color;
			ctx.beginPath();
			for (const i of indices) {
				const s = this.#view.toScreen({ x: this.#xs[i], y: this.#ys[i] });
				ctx.moveTo(s.x + r, s.y);
				ctx.arc(s.x, s.y, r, 0, 2 * Math.PI);
			}
			ctx.fill();
		}

		// Selection rings.
		if (this.#selected.size > 0) {
			ctx.strokeStyle = "#111111";
			ctx.lineWidth = 1.5;
			ctx.beginPath();
			for (const key of this.#selected) {
				const i = this.#indexOfKey.get(key);
				if (i === undefined) continue;
				const s = this.#view.toScreen({ x: this.#xs[i], y: this.#ys[i] });
				ctx.moveTo(s.x + r + 2, s.y);
				ctx.arc(s.x, s.y, r + 2, 0, 2 * Math.PI);
			}
			ctx.stroke();
		}

		// Active track trajectory: solid segments between consecutive frames,
		// dashed across frame gaps, enlarged marker on the playback frame.
		if (this.#trajectory && this.#trajectory.length > 0) {
			ctx.lineWidth = 1.75;
			for (let i = 1; i < this.#trajectory.length; i++) {
				const a = this.#trajectory[i - 1];
				const b = this.#trajectory[i];
				const sa = this.#view.toScreen(a);
				const sb = this.#view.toScreen(b);
				ctx.strokeStyle = "#222222";
				ctx.setLineDash(b.t - a.t > 1 ? [4, 4] : []);
				ctx.beginPath();
				ctx.moveTo(sa.x, sa.y);
				ctx.lineTo(sb.x, sb.y);
				ctx.stroke();
			}
			ctx.setLineDash([]);
			for (const v of this.#trajectory) {
				const s = this.#view.toScreen(v);
				ctx.fillStyle = v.key === this.#currentKey ? "#ff3d00" : "#222222";
				const vr = v.key === this.#currentKey ? r + 3 : r - 1;
				ctx.beginPath();
				ctx.arc(s.x, s.y, Math.max(1.5, vr), 0, 2 * Math.PI);
				ctx.fill();
			}
		}

		// Lasso in progress.
		if (this.#lassoPath.length >= 2) {
			ctx.strokeStyle = "#0055cc";
			ctx.lineWidth = 1;
			ctx.setLineDash([5, 3]);
			ctx.beginPath();
			ctx.moveTo(this.#lassoPath[0].x, this.#lassoPath[0].y);
			for (const p of this.#lassoPath.slice(1)) ctx.lineTo(p.x, p.y);
			ctx.closePath();
			ctx.stroke();
			ctx.setLineDash([]);
		}
	}
}
